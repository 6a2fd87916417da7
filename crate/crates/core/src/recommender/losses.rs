//! Ranking and contrastive objectives, in scalar form and as tape graphs.

use crate::autograd::{sigmoid, softplus, Mat, Tape, Var};

/// `Σ −ln σ(pos − neg)` over `(pos, neg)` score pairs.
pub fn loss_item(pairs: &[(f64, f64)]) -> f64 {
    pairs.iter().map(|(p, n)| softplus(n - p)).sum()
}

/// Attribute pairs for one target: `ranking` ranks oracle attributes above
/// sampled non-oracle attributes, `activation` ranks activation attributes
/// above the remaining oracle attributes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttrPairs {
    pub ranking: Vec<(usize, usize)>,
    pub activation: Vec<(usize, usize)>,
}

impl AttrPairs {
    /// `negatives[i]` lists the sampled non-oracle attributes for `oracle[i]`.
    pub fn build(oracle: &[usize], activation: &[usize], negatives: &[Vec<usize>]) -> Self {
        assert!(activation.iter().all(|a| oracle.contains(a)), "activation attributes must be oracle attributes");
        let ranking = oracle.iter().zip(negatives).flat_map(|(&a, negs)| negs.iter().map(move |&n| (a, n))).collect();
        let activation_pairs = activation
            .iter()
            .flat_map(|&a| oracle.iter().filter(|o| !activation.contains(o)).map(move |&o| (a, o)))
            .collect();
        AttrPairs { ranking, activation: activation_pairs }
    }
}

/// `L_attr1 + L_attr2` given a score lookup.
pub fn loss_attr(pairs: &AttrPairs, score: impl Fn(usize) -> f64) -> f64 {
    let bpr = |p: &[(usize, usize)]| p.iter().map(|&(a, b)| softplus(score(b) - score(a))).sum::<f64>();
    bpr(&pairs.ranking) + bpr(&pairs.activation)
}

/// `Σ_k −log softmax_k'(e_item,k · e_attr,k' / τ)[k]`.
pub fn loss_infonce(item: &Mat, attr: &Mat, tau: f64) -> f64 {
    assert!(tau > 0.0);
    assert_eq!(item.dim(), attr.dim());
    let logits = item.dot(&attr.t()) / tau;
    let mut total = 0.0;
    for k in 0..logits.nrows() {
        let row = logits.row(k);
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[k];
    }
    total
}

/// Probability that the positive outranks the negative.
pub fn pair_probability(pos: f64, neg: f64) -> f64 {
    sigmoid(pos - neg)
}

/// `Σ softplus(neg − pos)` on a tape; both inputs are `R x 1`.
pub fn bpr_on_tape(tape: &Tape, pos: Var, neg: Var) -> Var {
    tape.sum(tape.softplus(tape.sub(neg, pos)))
}

/// `tanh(⟨interest_row, node_row⟩)` for each `(interest row, node row)` pair.
pub fn pair_scores(tape: &Tape, interests: Var, nodes: Var, pairs: &[(usize, usize)]) -> Var {
    let rows = tape.gather(interests, pairs.iter().map(|p| p.0).collect());
    let cols = tape.gather(nodes, pairs.iter().map(|p| p.1).collect());
    tape.tanh(tape.row_dot(rows, cols))
}

pub fn infonce_on_tape(tape: &Tape, item: Var, attr: Var, tau: f64) -> Var {
    let n = tape.shape(item).0;
    let logits = tape.scale(tape.matmul_bt(item, attr), 1.0 / tau);
    let targets: Vec<usize> = (0..n).collect();
    tape.cross_entropy(logits, &targets, &vec![1.0; n], None)
}
