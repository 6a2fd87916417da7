use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::catalog::HeteroGraph;
use crate::error::{Error, Result};
use crate::graph_embed::{rgcn_forward, GraphOperators, NodeEmbeddings, Relation, RgcnLayerVars};
use crate::params::ParamSet;

/// Number of fusion slots: `[e_u, e'_item, e'_attr, e⁻_item, e⁺_attr, e⁻_attr]`.
pub const SLOTS: usize = 6;
pub const SLOT_ITEM_INTEREST: usize = 1;
pub const SLOT_ATTR_INTEREST: usize = 2;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub rgcn_layers: usize,
    pub transformer_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// InfoNCE temperature τ.
    pub temperature: f64,
    /// Contrastive weight ω.
    pub contrastive_weight: f64,
    pub lr: f64,
    /// Keep `E^0` and the convolution weights fixed during pretraining.
    pub freeze_graph: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub negative_items: usize,
    pub negative_attrs: usize,
    pub max_rejected_attrs: usize,
    pub max_rejected_items: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            rgcn_layers: 2,
            transformer_layers: 2,
            heads: 2,
            ffn_mult: 4,
            temperature: 0.5,
            contrastive_weight: 0.01,
            lr: 5e-4,
            freeze_graph: false,
            epochs: 30,
            batch_size: 64,
            negative_items: 1,
            negative_attrs: 2,
            max_rejected_attrs: 3,
            max_rejected_items: 10,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if !(self.contrastive_weight >= 0.0) {
            return Err(Error::Config("contrastive weight must be >= 0".into()));
        }
        if self.ffn_mult == 0 || self.batch_size == 0 {
            return Err(Error::Config("ffn_mult and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Fusion inputs for one conversation, expressed as rows of some node table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SlotInputs {
    pub user: usize,
    pub prev_items: Vec<usize>,
    pub prev_attr_sets: Vec<Vec<usize>>,
    pub rejected_items: Vec<usize>,
    pub accepted_attrs: Vec<usize>,
    pub rejected_attrs: Vec<usize>,
}

/// Everything the recommender needs about one conversation, in dense
/// catalog indices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InterestContext {
    pub user: usize,
    pub prev_items: Vec<usize>,
    pub prev_attr_sets: Vec<Vec<usize>>,
    #[serde(default)]
    pub rejected_items: Vec<usize>,
    #[serde(default)]
    pub accepted_attrs: Vec<usize>,
    #[serde(default)]
    pub rejected_attrs: Vec<usize>,
}

impl InterestContext {
    /// Maps catalog indices to rows of the full graph node table.
    pub fn to_graph_slots(&self, n_users: usize, n_items: usize) -> SlotInputs {
        let item = |v: &usize| n_users + v;
        let attr = |a: &usize| n_users + n_items + a;
        SlotInputs {
            user: self.user,
            prev_items: self.prev_items.iter().map(item).collect(),
            prev_attr_sets: self.prev_attr_sets.iter().map(|s| s.iter().map(attr).collect()).collect(),
            rejected_items: self.rejected_items.iter().map(item).collect(),
            accepted_attrs: self.accepted_attrs.iter().map(attr).collect(),
            rejected_attrs: self.rejected_attrs.iter().map(attr).collect(),
        }
    }
}

/// Tape handles by parameter name.
pub struct Bound {
    map: BTreeMap<String, Var>,
}

impl Bound {
    pub fn new(tape: &Tape, params: &ParamSet) -> Self {
        let vars = tape.bind(params);
        Bound { map: params.names().iter().cloned().zip(vars).collect() }
    }

    pub fn get(&self, name: &str) -> Var {
        *self.map.get(name).unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }
}

/// Graph encoder, two GRUs, fusion Transformer and their parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RecModel {
    pub config: ModelConfig,
    pub n_users: usize,
    pub n_items: usize,
    pub n_attrs: usize,
    pub params: ParamSet,
}

fn gru_names(prefix: &str) -> [String; 10] {
    ["w_r", "w_z", "w_n", "u_r", "u_z", "u_n", "b_r", "b_z", "b_n", "b_hn"].map(|s| format!("{prefix}.{s}"))
}

impl RecModel {
    pub fn new(config: ModelConfig, graph: &HeteroGraph) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.dim;
        let bound = 1.0 / (d as f64).sqrt();
        let mut p = ParamSet::default();
        p.insert_uniform("e0", graph.n_nodes(), d, bound, &mut rng);
        for l in 0..config.rgcn_layers {
            p.insert_uniform(format!("rgcn.{l}.self"), d, d, bound, &mut rng);
            for r in Relation::ALL {
                p.insert_uniform(format!("rgcn.{l}.{}", r.name()), d, d, bound, &mut rng);
            }
        }
        for prefix in ["gru_item", "gru_attr"] {
            let names = gru_names(prefix);
            for n in &names[..6] {
                p.insert_uniform(n.clone(), d, d, bound, &mut rng);
            }
            for n in &names[6..] {
                p.insert(n.clone(), Mat::zeros((1, d)));
            }
        }
        p.insert_uniform("slot", SLOTS, d, 0.1, &mut rng);
        let hidden = d * config.ffn_mult;
        for l in 0..config.transformer_layers {
            p.insert(format!("tf.{l}.ln1.g"), Mat::ones((1, d)));
            p.insert(format!("tf.{l}.ln1.b"), Mat::zeros((1, d)));
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert_uniform(format!("tf.{l}.{w}"), d, d, bound, &mut rng);
            }
            p.insert(format!("tf.{l}.bo"), Mat::zeros((1, d)));
            p.insert(format!("tf.{l}.ln2.g"), Mat::ones((1, d)));
            p.insert(format!("tf.{l}.ln2.b"), Mat::zeros((1, d)));
            p.insert_uniform(format!("tf.{l}.w1"), hidden, d, bound, &mut rng);
            p.insert(format!("tf.{l}.b1"), Mat::zeros((1, hidden)));
            p.insert_uniform(format!("tf.{l}.w2"), d, hidden, 1.0 / (hidden as f64).sqrt(), &mut rng);
            p.insert(format!("tf.{l}.b2"), Mat::zeros((1, d)));
        }
        p.insert("tf.final.g", Mat::ones((1, d)));
        p.insert("tf.final.b", Mat::zeros((1, d)));
        Ok(RecModel { config, n_users: graph.n_users, n_items: graph.n_items, n_attrs: graph.n_attrs, params: p })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items + self.n_attrs
    }

    pub fn is_graph_param(name: &str) -> bool {
        name == "e0" || name.starts_with("rgcn.")
    }

    /// Per-parameter freeze mask for the optimizer.
    pub fn frozen_mask(&self) -> Vec<bool> {
        self.params.names().iter().map(|n| self.config.freeze_graph && Self::is_graph_param(n)).collect()
    }

    /// Parameters used after the graph encoder (GRUs, fusion).
    pub fn interest_params(&self) -> ParamSet {
        let mut out = ParamSet::default();
        for (n, v) in self.params.names().iter().zip(self.params.values()) {
            if !Self::is_graph_param(n) {
                out.insert(n.clone(), v.clone());
            }
        }
        out
    }

    /// Refined node table on a tape (graph encoder output).
    pub fn node_table(&self, tape: &Tape, ops: &GraphOperators, b: &Bound) -> Var {
        let layers: Vec<RgcnLayerVars> = (0..self.config.rgcn_layers)
            .map(|l| RgcnLayerVars {
                self_weight: b.get(&format!("rgcn.{l}.self")),
                relation: Relation::ALL.map(|r| b.get(&format!("rgcn.{l}.{}", r.name()))),
            })
            .collect();
        rgcn_forward(tape, ops, b.get("e0"), &layers)
    }

    /// Frozen node embeddings for inference.
    pub fn encode(&self, graph: &HeteroGraph) -> NodeEmbeddings {
        let tape = Tape::new();
        let b = Bound::new(&tape, &self.params);
        let ops = GraphOperators::new(graph);
        let t = self.node_table(&tape, &ops, &b);
        NodeEmbeddings { table: tape.value(t), n_users: self.n_users, n_items: self.n_items, n_attrs: self.n_attrs }
    }

    fn gru_cell(tape: &Tape, b: &Bound, prefix: &str, x: Var, h: Var) -> Var {
        let [w_r, w_z, w_n, u_r, u_z, u_n, b_r, b_z, b_n, b_hn] = gru_names(prefix).map(|n| b.get(&n));
        let gate = |w, u, bias| {
            let s = tape.add(tape.matmul_bt(x, w), tape.matmul_bt(h, u));
            tape.sigmoid(tape.add_row(s, bias))
        };
        let r = gate(w_r, u_r, b_r);
        let z = gate(w_z, u_z, b_z);
        let hn = tape.add_row(tape.matmul_bt(h, u_n), b_hn);
        let n = tape.tanh(tape.add(tape.add_row(tape.matmul_bt(x, w_n), b_n), tape.mul(r, hn)));
        // h' = (1 − z)·n + z·h = n + z·(h − n)
        tape.add(n, tape.mul(z, tape.sub(h, n)))
    }

    /// Runs a GRU from the zero state over per-row step inputs; rows with
    /// shorter sequences keep their state once exhausted.
    fn gru(&self, tape: &Tape, b: &Bound, prefix: &str, steps: &[Var], lengths: &[usize]) -> Var {
        let d = self.config.dim;
        let rows = lengths.len();
        let mut h = tape.constant(Mat::zeros((rows, d)));
        for (s, &x) in steps.iter().enumerate() {
            let next = Self::gru_cell(tape, b, prefix, x, h);
            if lengths.iter().all(|&l| l > s) {
                h = next;
            } else {
                let mask = Mat::from_shape_fn((rows, d), |(r, _)| if lengths[r] > s { 1.0 } else { 0.0 });
                let m = tape.constant(mask);
                h = tape.add(h, tape.mul(m, tape.sub(next, h)));
            }
        }
        h
    }

    /// Short-term interests `(e'_item, e'_attr)` from previous subsessions.
    pub fn short_term(&self, tape: &Tape, b: &Bound, nodes: Var, batch: &[SlotInputs]) -> (Var, Var) {
        let lengths: Vec<usize> = batch.iter().map(|x| x.prev_items.len()).collect();
        assert!(lengths.iter().all(|&l| l >= 1), "short-term interest needs at least one previous subsession");
        for x in batch {
            assert_eq!(x.prev_items.len(), x.prev_attr_sets.len(), "item and attribute sequences differ in length");
            assert!(x.prev_attr_sets.iter().all(|s| !s.is_empty()), "empty attribute set in history");
        }
        let max_len = *lengths.iter().max().unwrap_or(&0);
        let item_steps: Vec<Var> = (0..max_len)
            .map(|s| tape.gather(nodes, batch.iter().map(|x| *x.prev_items.get(s).unwrap_or(&x.prev_items[0])).collect()))
            .collect();
        let attr_steps: Vec<Var> = (0..max_len)
            .map(|s| {
                let groups = batch.iter().map(|x| x.prev_attr_sets.get(s).unwrap_or(&x.prev_attr_sets[0]).clone()).collect();
                tape.segment_mean(nodes, groups)
            })
            .collect();
        (self.gru(tape, b, "gru_item", &item_steps, &lengths), self.gru(tape, b, "gru_attr", &attr_steps, &lengths))
    }

    /// Transformer fusion over `B·6` slot rows. Returns the full output table;
    /// masked slots are excluded as keys and values.
    pub fn fuse(&self, tape: &Tape, b: &Bound, slots: Var, key_mask: &[bool]) -> Var {
        let mut x = tape.add_tiled(slots, b.get("slot"));
        let ln = |x: Var, g: &str, bias: &str| tape.add_row(tape.mul_row(tape.layer_norm(x, LN_EPS), b.get(g)), b.get(bias));
        for l in 0..self.config.transformer_layers {
            let h = ln(x, &format!("tf.{l}.ln1.g"), &format!("tf.{l}.ln1.b"));
            let q = tape.matmul_bt(h, b.get(&format!("tf.{l}.wq")));
            let k = tape.matmul_bt(h, b.get(&format!("tf.{l}.wk")));
            let v = tape.matmul_bt(h, b.get(&format!("tf.{l}.wv")));
            let a = tape.block_attention(q, k, v, SLOTS, self.config.heads, key_mask);
            let o = tape.add_row(tape.matmul_bt(a, b.get(&format!("tf.{l}.wo"))), b.get(&format!("tf.{l}.bo")));
            x = tape.add(x, o);
            let h2 = ln(x, &format!("tf.{l}.ln2.g"), &format!("tf.{l}.ln2.b"));
            let f = tape.relu(tape.add_row(tape.matmul_bt(h2, b.get(&format!("tf.{l}.w1"))), b.get(&format!("tf.{l}.b1"))));
            let f = tape.add_row(tape.matmul_bt(f, b.get(&format!("tf.{l}.w2"))), b.get(&format!("tf.{l}.b2")));
            x = tape.add(x, f);
        }
        ln(x, "tf.final.g", "tf.final.b")
    }

    /// Final item- and attribute-level interests, each `B x D`.
    pub fn interests(&self, tape: &Tape, b: &Bound, nodes: Var, batch: &[SlotInputs]) -> (Var, Var) {
        let (item_st, attr_st) = self.short_term(tape, b, nodes, batch);
        let users = tape.gather(nodes, batch.iter().map(|x| x.user).collect());
        let rej_items = tape.segment_mean(nodes, batch.iter().map(|x| x.rejected_items.clone()).collect());
        let acc_attrs = tape.segment_mean(nodes, batch.iter().map(|x| x.accepted_attrs.clone()).collect());
        let rej_attrs = tape.segment_mean(nodes, batch.iter().map(|x| x.rejected_attrs.clone()).collect());
        let slots = tape.interleave(&[users, item_st, attr_st, rej_items, acc_attrs, rej_attrs]);
        let mask = slot_mask(batch);
        let fused = self.fuse(tape, b, slots, &mask);
        let n = batch.len();
        let item = tape.gather(fused, (0..n).map(|i| i * SLOTS + SLOT_ITEM_INTEREST).collect());
        let attr = tape.gather(fused, (0..n).map(|i| i * SLOTS + SLOT_ATTR_INTEREST).collect());
        (item, attr)
    }
}

/// Key mask for the fusion sequence: the first three slots are always
/// present, feedback slots only when their set is non-empty.
pub fn slot_mask(batch: &[SlotInputs]) -> Vec<bool> {
    batch
        .iter()
        .flat_map(|x| [true, true, true, !x.rejected_items.is_empty(), !x.accepted_attrs.is_empty(), !x.rejected_attrs.is_empty()])
        .collect()
}

/// Aggregated current-turn feedback vectors and their presence mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackVectors {
    pub rejected_items: ndarray::Array1<f64>,
    pub accepted_attrs: ndarray::Array1<f64>,
    pub rejected_attrs: ndarray::Array1<f64>,
    pub present: [bool; 3],
}

/// Mean of member embeddings per feedback set; empty sets give a zero vector
/// and are marked absent.
pub fn aggregate_feedback(rejected_items: &[usize], accepted_attrs: &[usize], rejected_attrs: &[usize], embs: &NodeEmbeddings) -> FeedbackVectors {
    let mean = |rows: Vec<ndarray::ArrayView1<f64>>| {
        let mut acc = ndarray::Array1::zeros(embs.dim());
        for r in &rows {
            acc += r;
        }
        if !rows.is_empty() {
            acc /= rows.len() as f64;
        }
        acc
    };
    FeedbackVectors {
        rejected_items: mean(rejected_items.iter().map(|&v| embs.item(v)).collect()),
        accepted_attrs: mean(accepted_attrs.iter().map(|&a| embs.attr(a)).collect()),
        rejected_attrs: mean(rejected_attrs.iter().map(|&a| embs.attr(a)).collect()),
        present: [!rejected_items.is_empty(), !accepted_attrs.is_empty(), !rejected_attrs.is_empty()],
    }
}

/// Candidate scores `tanh(e'ᵀ e)`, keyed by dense index.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub item_scores: BTreeMap<usize, f64>,
    pub attr_scores: BTreeMap<usize, f64>,
}

impl ScoreTable {
    /// Items by descending score, ties broken by ascending index.
    pub fn ranked_items(&self) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = self.item_scores.iter().map(|(&k, &s)| (k, s)).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    pub fn top_items(&self, k: usize) -> Vec<usize> {
        self.ranked_items().into_iter().take(k).map(|(v, _)| v).collect()
    }
}

/// Scores only the given candidates.
pub fn score(item_interest: ndarray::ArrayView1<f64>, attr_interest: ndarray::ArrayView1<f64>, embs: &NodeEmbeddings, items: &BTreeSet<usize>, attrs: &BTreeSet<usize>) -> ScoreTable {
    ScoreTable {
        item_scores: items.iter().map(|&v| (v, item_interest.dot(&embs.item(v)).tanh())).collect(),
        attr_scores: attrs.iter().map(|&a| (a, attr_interest.dot(&embs.attr(a)).tanh())).collect(),
    }
}

/// Recommender with frozen parameters and a cached node table; scoring is
/// read-only and safe to share across threads.
#[derive(Clone, Debug)]
pub struct FrozenRecommender {
    pub model: RecModel,
    pub nodes: NodeEmbeddings,
    interest_params: ParamSet,
}

impl FrozenRecommender {
    pub fn new(model: RecModel, graph: &HeteroGraph) -> Self {
        let nodes = model.encode(graph);
        let interest_params = model.interest_params();
        FrozenRecommender { model, nodes, interest_params }
    }

    /// Final `(e'_item, e'_attr)` for one conversation.
    pub fn interests(&self, ctx: &InterestContext) -> (ndarray::Array1<f64>, ndarray::Array1<f64>) {
        // gather only the rows this context touches into a local table
        let mut rows: Vec<usize> = Vec::new();
        let local = |node: usize, rows: &mut Vec<usize>| {
            if let Some(p) = rows.iter().position(|&r| r == node) {
                p
            } else {
                rows.push(node);
                rows.len() - 1
            }
        };
        let g = ctx.to_graph_slots(self.nodes.n_users, self.nodes.n_items);
        let map = |v: &[usize], rows: &mut Vec<usize>| v.iter().map(|&n| local(n, rows)).collect::<Vec<_>>();
        let slots = SlotInputs {
            user: map(&[g.user], &mut rows)[0],
            prev_items: map(&g.prev_items, &mut rows),
            prev_attr_sets: g.prev_attr_sets.iter().map(|s| map(s, &mut rows)).collect(),
            rejected_items: map(&g.rejected_items, &mut rows),
            accepted_attrs: map(&g.accepted_attrs, &mut rows),
            rejected_attrs: map(&g.rejected_attrs, &mut rows),
        };
        let table = self.nodes.table.select(ndarray::Axis(0), &rows);
        let tape = Tape::new();
        let b = Bound::new(&tape, &self.interest_params);
        let nodes = tape.constant(table);
        let (item, attr) = self.model.interests(&tape, &b, nodes, std::slice::from_ref(&slots));
        (tape.value(item).row(0).to_owned(), tape.value(attr).row(0).to_owned())
    }

    pub fn score(&self, ctx: &InterestContext, items: &BTreeSet<usize>, attrs: &BTreeSet<usize>) -> ScoreTable {
        let (item, attr) = self.interests(ctx);
        score(item.view(), attr.view(), &self.nodes, items, attrs)
    }
}

/// Draws `count` distinct values uniformly from `pool` (all of it if smaller).
pub(crate) fn sample_distinct(pool: &[usize], count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut out: Vec<usize> = rand::seq::index::sample(rng, pool.len(), count.min(pool.len())).into_iter().map(|i| pool[i]).collect();
    out.sort_unstable();
    out
}
