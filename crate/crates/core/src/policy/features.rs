use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::environment::{Action, ConvState, Feedback};
use crate::recommender::ScoreTable;

/// Number of candidate-set size bins.
pub const LEN_BINS: usize = 10;
/// History categories per turn.
pub const HIS_KINDS: usize = 5;

/// Binary entropy (base 2) of attribute `a` over the candidate items.
pub fn entropy_of_attribute(a: usize, v_cand: &BTreeSet<usize>, item_attrs: &[Vec<usize>]) -> f64 {
    assert!(!v_cand.is_empty(), "entropy over an empty candidate set");
    let hits = v_cand.iter().filter(|&&v| item_attrs[v].contains(&a)).count();
    binary_entropy(hits as f64 / v_cand.len() as f64)
}

pub fn binary_entropy(p: f64) -> f64 {
    let term = |x: f64| if x <= 0.0 { 0.0 } else { -x * x.log2() };
    term(p) + term(1.0 - p)
}

/// Entropies for every attribute in `a_cand` with one pass over `V_cand`.
pub fn candidate_entropies(state: &ConvState, item_attrs: &[Vec<usize>], n_attrs: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_attrs];
    for &v in &state.v_cand {
        for &a in &item_attrs[v] {
            counts[a] += 1;
        }
    }
    let n = state.v_cand.len().max(1) as f64;
    (0..n_attrs).map(|a| if state.a_cand.contains(&a) { binary_entropy(counts[a] as f64 / n) } else { 0.0 }).collect()
}

/// Attribute-agent input: `s_pre ⊕ s_ent ⊕ s_act_num ⊕ s_turn` plus the candidate mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttrState {
    pub pre: Vec<f64>,
    pub ent: Vec<f64>,
    pub act_num: f64,
    pub turn: f64,
    pub mask: Vec<bool>,
}

impl AttrState {
    pub fn build(state: &ConvState, scores: &ScoreTable, entropies: &[f64], max_turns: usize) -> Self {
        let n = entropies.len();
        let mask: Vec<bool> = (0..n).map(|a| state.a_cand.contains(&a)).collect();
        AttrState {
            pre: (0..n).map(|a| if mask[a] { scores.attr_scores.get(&a).copied().unwrap_or(0.0) } else { 0.0 }).collect(),
            ent: (0..n).map(|a| if mask[a] { entropies[a] } else { 0.0 }).collect(),
            act_num: state.a_acc.len() as f64,
            turn: state.turn as f64 / max_turns as f64,
            mask,
        }
    }

    pub fn dim(n_attrs: usize) -> usize {
        2 * n_attrs + 2
    }

    pub fn features(&self) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.pre.len() * 2 + 2);
        f.extend(&self.pre);
        f.extend(&self.ent);
        f.push(self.act_num);
        f.push(self.turn);
        f
    }
}

/// History category of one completed turn.
pub fn history_kind(action: &Action, feedback: &Feedback) -> usize {
    match (action, feedback) {
        (Action::Ask { .. }, Feedback::Accept) => 1,
        (Action::Ask { .. }, Feedback::Reject) => 2,
        (Action::Ask { .. }, Feedback::Unknown) => 3,
        _ => 4,
    }
}

/// `min(⌊2·log10 n⌋, 9)`; bin `i` covers `[10^(i/2), 10^((i+1)/2))`.
pub fn len_bin(n: usize) -> usize {
    if n <= 1 {
        return 0;
    }
    // exact integer comparisons avoid rounding at the bin edges: n ≥ 10^(i/2) ⇔ n² ≥ 10^i
    let sq = (n as u128) * (n as u128);
    let mut bin = 0;
    while bin + 1 < LEN_BINS && sq >= 10u128.pow(bin as u32 + 1) {
        bin += 1;
    }
    bin
}

/// Conversation-agent input: `s_his ⊕ s_len ⊕ s_item ⊕ s_attr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvPolicyState {
    pub his: Vec<f64>,
    pub len: Vec<f64>,
    pub item: Vec<f64>,
    pub attr: [f64; 2],
}

impl ConvPolicyState {
    /// `next_attr` is `(P_attr, w_a)` of the attribute the attribute agent would ask.
    pub fn build(state: &ConvState, scores: &ScoreTable, next_attr: Option<(f64, f64)>, max_turns: usize, list_size: usize) -> Self {
        let mut his = vec![0.0; max_turns * HIS_KINDS];
        for t in 0..max_turns {
            let kind = state.transcript.get(t).map_or(0, |e| history_kind(&e.action, &e.feedback));
            his[t * HIS_KINDS + kind] = 1.0;
        }
        let mut len = vec![0.0; LEN_BINS];
        len[len_bin(state.v_cand.len())] = 1.0;
        let mut item: Vec<f64> = state.v_cand.iter().filter_map(|v| scores.item_scores.get(v).copied()).collect();
        item.sort_by(|a, b| b.total_cmp(a));
        item.resize(list_size, 0.0);
        let (p, w) = next_attr.unwrap_or((0.0, 0.0));
        ConvPolicyState { his, len, item, attr: [p, w] }
    }

    pub fn dim(max_turns: usize, list_size: usize) -> usize {
        HIS_KINDS * max_turns + LEN_BINS + list_size + 2
    }

    pub fn features(&self) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.his.len() + LEN_BINS + self.item.len() + 2);
        f.extend(&self.his);
        f.extend(&self.len);
        f.extend(&self.item);
        f.extend(self.attr);
        f
    }
}
