use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Csr, Mat, SparseOp, Tape, Var};
use crate::catalog::HeteroGraph;

/// Directed message type. Each undirected edge family carries two relations
/// with separate weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    UserToItem,
    ItemToUser,
    AttrToItem,
    ItemToAttr,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::UserToItem, Relation::ItemToUser, Relation::AttrToItem, Relation::ItemToAttr];

    pub fn name(self) -> &'static str {
        match self {
            Relation::UserToItem => "user_item",
            Relation::ItemToUser => "item_user",
            Relation::AttrToItem => "attr_item",
            Relation::ItemToAttr => "item_attr",
        }
    }
}

/// Normalized adjacency per relation. Entry `(n, i)` of relation `r` is
/// `1/√(|N_n^r|·|N_i^r|)` where degrees are taken within the edge family of `r`.
#[derive(Clone, Debug)]
pub struct GraphOperators {
    pub n_nodes: usize,
    pub relations: [Arc<SparseOp>; 4],
}

impl GraphOperators {
    pub fn new(graph: &HeteroGraph) -> Self {
        let n = graph.n_nodes();
        let mut user_deg = vec![0usize; graph.n_users];
        let mut item_user_deg = vec![0usize; graph.n_items];
        for &(u, v) in &graph.edges_uv {
            user_deg[u] += 1;
            item_user_deg[v] += 1;
        }
        let mut attr_deg = vec![0usize; graph.n_attrs];
        let mut item_attr_deg = vec![0usize; graph.n_items];
        for &(a, v) in &graph.edges_av {
            attr_deg[a] += 1;
            item_attr_deg[v] += 1;
        }
        let mut user_to_item = Vec::new();
        for &(u, v) in &graph.edges_uv {
            let c = 1.0 / ((user_deg[u] * item_user_deg[v]) as f64).sqrt();
            user_to_item.push((graph.item_node(v), graph.user_node(u), c));
        }
        let mut attr_to_item = Vec::new();
        for &(a, v) in &graph.edges_av {
            let c = 1.0 / ((attr_deg[a] * item_attr_deg[v]) as f64).sqrt();
            attr_to_item.push((graph.item_node(v), graph.attr_node(a), c));
        }
        let flip = |t: &[(usize, usize, f64)]| t.iter().map(|&(r, c, v)| (c, r, v)).collect::<Vec<_>>();
        GraphOperators {
            n_nodes: n,
            relations: [
                SparseOp::new(Csr::from_triplets(n, n, user_to_item.clone())),
                SparseOp::new(Csr::from_triplets(n, n, flip(&user_to_item))),
                SparseOp::new(Csr::from_triplets(n, n, attr_to_item.clone())),
                SparseOp::new(Csr::from_triplets(n, n, flip(&attr_to_item))),
            ],
        }
    }
}

/// Weights of one convolution layer, each `D x D`, applied as `W e`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgcnLayerWeights {
    pub self_weight: Mat,
    pub relation: [Mat; 4],
}

impl RgcnLayerWeights {
    pub fn identity(dim: usize) -> Self {
        let eye = Mat::eye(dim);
        RgcnLayerWeights { self_weight: eye.clone(), relation: [eye.clone(), eye.clone(), eye.clone(), eye] }
    }

    pub fn random(dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let mut draw = || Mat::from_shape_fn((dim, dim), |_| rng.random_range(-bound..bound));
        RgcnLayerWeights { self_weight: draw(), relation: [draw(), draw(), draw(), draw()] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RgcnParams {
    /// Initial node table `E^0`, `|N| x D`.
    pub e0: Mat,
    pub layers: Vec<RgcnLayerWeights>,
}

impl RgcnParams {
    /// `E^0 ~ U(−1/√D, 1/√D)`; layer weights drawn on the same scale.
    pub fn init(n_nodes: usize, dim: usize, layers: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let e0 = Mat::from_shape_fn((n_nodes, dim), |_| rng.random_range(-bound..bound));
        RgcnParams { e0, layers: (0..layers).map(|_| RgcnLayerWeights::random(dim, rng)).collect() }
    }
}

/// Tape handles for one layer's weights.
#[derive(Clone, Copy, Debug)]
pub struct RgcnLayerVars {
    pub self_weight: Var,
    pub relation: [Var; 4],
}

/// Refined node table with role views.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeEmbeddings {
    pub table: Mat,
    pub n_users: usize,
    pub n_items: usize,
    pub n_attrs: usize,
}

impl NodeEmbeddings {
    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn user(&self, u: usize) -> ndarray::ArrayView1<'_, f64> {
        self.table.row(u)
    }

    pub fn item(&self, v: usize) -> ndarray::ArrayView1<'_, f64> {
        self.table.row(self.n_users + v)
    }

    pub fn attr(&self, a: usize) -> ndarray::ArrayView1<'_, f64> {
        self.table.row(self.n_users + self.n_items + a)
    }

    pub fn items(&self) -> ndarray::ArrayView2<'_, f64> {
        self.table.slice(ndarray::s![self.n_users..self.n_users + self.n_items, ..])
    }

    pub fn attrs(&self) -> ndarray::ArrayView2<'_, f64> {
        self.table.slice(ndarray::s![self.n_users + self.n_items.., ..])
    }
}

fn layer_on_tape(tape: &Tape, ops: &GraphOperators, e: Var, w: &RgcnLayerVars) -> Var {
    let mut acc = tape.matmul_bt(e, w.self_weight);
    for (op, weight) in ops.relations.iter().zip(w.relation) {
        let projected = tape.matmul_bt(e, weight);
        acc = tape.add(acc, tape.spmm(op, projected));
    }
    tape.relu(acc)
}

/// Full encoder on a tape: `L_g` convolution layers, then the mean of all
/// `L_g + 1` layer outputs (layer 0 included).
pub fn rgcn_forward(tape: &Tape, ops: &GraphOperators, e0: Var, layers: &[RgcnLayerVars]) -> Var {
    let mut current = e0;
    let mut total = e0;
    for w in layers {
        current = layer_on_tape(tape, ops, current, w);
        total = tape.add(total, current);
    }
    tape.scale(total, 1.0 / (layers.len() + 1) as f64)
}

/// One propagation step:
/// `e_n' = ReLU(Σ_r Σ_{i∈N_n^r} W_r e_i / √(|N_n^r||N_i^r|) + W_0 e_n)`.
pub fn rgcn_layer(ops: &GraphOperators, embs: &Mat, weights: &RgcnLayerWeights) -> Mat {
    assert_eq!(embs.nrows(), ops.n_nodes, "embedding rows must match graph node count");
    let tape = Tape::new();
    let e = tape.constant(embs.clone());
    let vars = RgcnLayerVars {
        self_weight: tape.constant(weights.self_weight.clone()),
        relation: weights.relation.clone().map(|m| tape.constant(m)),
    };
    let out = layer_on_tape(&tape, ops, e, &vars);
    tape.value(out)
}

pub fn encode_graph(graph: &HeteroGraph, params: &RgcnParams) -> NodeEmbeddings {
    let ops = GraphOperators::new(graph);
    assert_eq!(params.e0.nrows(), graph.n_nodes(), "E^0 rows must match graph node count");
    let tape = Tape::new();
    let e0 = tape.constant(params.e0.clone());
    let layers: Vec<RgcnLayerVars> = params
        .layers
        .iter()
        .map(|w| RgcnLayerVars {
            self_weight: tape.constant(w.self_weight.clone()),
            relation: w.relation.clone().map(|m| tape.constant(m)),
        })
        .collect();
    let out = rgcn_forward(&tape, &ops, e0, &layers);
    NodeEmbeddings { table: tape.value(out), n_users: graph.n_users, n_items: graph.n_items, n_attrs: graph.n_attrs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_graph() -> HeteroGraph {
        // one user, one item, one attribute: u - v - a
        HeteroGraph { n_users: 1, n_items: 1, n_attrs: 1, edges_uv: vec![(0, 0)], edges_av: vec![(0, 0)] }
    }

    #[test]
    fn isolated_node_uses_self_term_only() {
        let g = HeteroGraph { n_users: 1, n_items: 0, n_attrs: 0, edges_uv: vec![], edges_av: vec![] };
        let ops = GraphOperators::new(&g);
        let out = rgcn_layer(&ops, &array![[1.0, -1.0]], &RgcnLayerWeights::identity(2));
        assert_eq!(out, array![[1.0, 0.0]]);
    }

    #[test]
    fn item_with_one_user_and_one_attribute() {
        let g = tiny_graph();
        let ops = GraphOperators::new(&g);
        let out = rgcn_layer(&ops, &Mat::ones((3, 2)), &RgcnLayerWeights::identity(2));
        assert_eq!(out.row(g.item_node(0)).to_vec(), vec![3.0, 3.0]);
        // user and attribute each have one neighbour (the item) plus self
        assert_eq!(out.row(0).to_vec(), vec![2.0, 2.0]);
    }

    #[test]
    fn zero_layers_returns_initial_table() {
        let g = tiny_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = RgcnParams::init(3, 4, 0, &mut rng);
        assert_eq!(encode_graph(&g, &p).table, p.e0);
    }

    #[test]
    fn two_layers_average_three_tables() {
        let g = HeteroGraph { n_users: 2, n_items: 3, n_attrs: 2, edges_uv: vec![(0, 0), (0, 1), (1, 1), (1, 2)], edges_av: vec![(0, 0), (0, 2), (1, 1), (1, 2)] };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = RgcnParams::init(g.n_nodes(), 4, 2, &mut rng);
        let ops = GraphOperators::new(&g);
        let e1 = rgcn_layer(&ops, &p.e0, &p.layers[0]);
        let e2 = rgcn_layer(&ops, &e1, &p.layers[1]);
        let expected = (&p.e0 + &e1 + &e2) / 3.0;
        let got = encode_graph(&g, &p).table;
        assert!((&got - &expected).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn views_slice_by_role() {
        let e = NodeEmbeddings { table: Mat::from_shape_fn((6, 1), |(r, _)| r as f64), n_users: 1, n_items: 2, n_attrs: 3 };
        assert_eq!(e.user(0)[0], 0.0);
        assert_eq!(e.item(1)[0], 2.0);
        assert_eq!(e.attr(0)[0], 3.0);
        assert_eq!(e.attrs().nrows(), 3);
    }
}
