use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::catalog::HeteroGraph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransEConfig {
    pub dim: usize,
    pub margin: f64,
    pub epochs: usize,
    pub negatives: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TransEConfig {
    fn default() -> Self {
        TransEConfig { dim: 64, margin: 1.0, epochs: 500, negatives: 1, lr: 0.01, seed: 17 }
    }
}

/// Frozen translation embeddings: `users`, `items`, `attrs` tables and one
/// relation vector per edge family (row 0: user→item, row 1: item→attribute).
#[derive(Clone, Debug, PartialEq)]
pub struct KgEmbeddings {
    pub users: Mat,
    pub items: Mat,
    pub attrs: Mat,
    pub relations: Mat,
}

impl KgEmbeddings {
    pub fn all_finite(&self) -> bool {
        [&self.users, &self.items, &self.attrs, &self.relations].iter().all(|m| m.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Table {
    Users,
    Items,
    Attrs,
}

#[derive(Clone, Copy, Debug)]
struct Triple {
    head: (Table, usize),
    relation: usize,
    tail: (Table, usize),
}

/// `‖h + r − t‖₂`.
pub fn transe_distance(h: &[f64], r: &[f64], t: &[f64]) -> f64 {
    h.iter().zip(r).zip(t).map(|((h, r), t)| (h + r - t).powi(2)).sum::<f64>().sqrt()
}

/// Margin ranking loss of one positive/corrupted pair.
pub fn triple_hinge(margin: f64, positive_distance: f64, negative_distance: f64) -> f64 {
    (margin + positive_distance - negative_distance).max(0.0)
}

fn table_len(graph: &HeteroGraph, t: Table) -> usize {
    match t {
        Table::Users => graph.n_users,
        Table::Items => graph.n_items,
        Table::Attrs => graph.n_attrs,
    }
}

fn row<'a>(kg: &'a KgEmbeddings, (t, i): (Table, usize)) -> ndarray::ArrayView1<'a, f64> {
    match t {
        Table::Users => kg.users.row(i),
        Table::Items => kg.items.row(i),
        Table::Attrs => kg.attrs.row(i),
    }
}

fn row_mut<'a>(kg: &'a mut KgEmbeddings, (t, i): (Table, usize)) -> ndarray::ArrayViewMut1<'a, f64> {
    match t {
        Table::Users => kg.users.row_mut(i),
        Table::Items => kg.items.row_mut(i),
        Table::Attrs => kg.attrs.row_mut(i),
    }
}

fn normalize_rows(m: &mut Mat) {
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        if n > 0.0 {
            r /= n;
        }
    }
}

/// Trains translation embeddings on triples `(user, interacts, item)` and
/// `(item, has_attribute, attribute)` with margin ranking loss and SGD.
/// Each positive is paired with `negatives` corruptions of head or tail
/// (chosen uniformly, replacement drawn from the same node type). Entity rows
/// are renormalized to unit length at the start of every epoch.
pub fn train_transe(graph: &HeteroGraph, config: &TransEConfig) -> KgEmbeddings {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.dim;
    let bound = 6.0 / (d as f64).sqrt();
    let mut init = |rows: usize| Mat::from_shape_fn((rows, d), |_| rng.random_range(-bound..bound));
    let mut kg = KgEmbeddings {
        users: init(graph.n_users),
        items: init(graph.n_items),
        attrs: init(graph.n_attrs),
        relations: init(2),
    };
    normalize_rows(&mut kg.relations);

    let mut triples: Vec<Triple> = graph
        .edges_uv
        .iter()
        .map(|&(u, v)| Triple { head: (Table::Users, u), relation: 0, tail: (Table::Items, v) })
        .chain(graph.edges_av.iter().map(|&(a, v)| Triple { head: (Table::Items, v), relation: 1, tail: (Table::Attrs, a) }))
        .collect();
    if triples.is_empty() {
        return kg;
    }

    for _ in 0..config.epochs {
        normalize_rows(&mut kg.users);
        normalize_rows(&mut kg.items);
        normalize_rows(&mut kg.attrs);
        triples.shuffle(&mut rng);
        for tr in &triples {
            for _ in 0..config.negatives.max(1) {
                let mut neg = *tr;
                if rng.random_bool(0.5) {
                    neg.head.1 = rng.random_range(0..table_len(graph, tr.head.0));
                } else {
                    neg.tail.1 = rng.random_range(0..table_len(graph, tr.tail.0));
                }
                sgd_pair(&mut kg, tr, &neg, config);
            }
        }
    }
    kg
}

fn residual(kg: &KgEmbeddings, t: &Triple) -> ndarray::Array1<f64> {
    &row(kg, t.head) + &kg.relations.row(t.relation) - &row(kg, t.tail)
}

fn sgd_pair(kg: &mut KgEmbeddings, pos: &Triple, neg: &Triple, config: &TransEConfig) {
    let rp = residual(kg, pos);
    let rn = residual(kg, neg);
    let (dp, dn) = (rp.dot(&rp).sqrt(), rn.dot(&rn).sqrt());
    if triple_hinge(config.margin, dp, dn) <= 0.0 {
        return;
    }
    // d‖x‖/dx = x/‖x‖; skip the degenerate zero-residual direction
    let gp = if dp > 1e-12 { rp / dp } else { ndarray::Array1::zeros(config.dim) };
    let gn = if dn > 1e-12 { rn / dn } else { ndarray::Array1::zeros(config.dim) };
    let lr = config.lr;
    row_mut(kg, pos.head).scaled_add(-lr, &gp);
    row_mut(kg, pos.tail).scaled_add(lr, &gp);
    kg.relations.row_mut(pos.relation).scaled_add(-lr, &gp);
    row_mut(kg, neg.head).scaled_add(lr, &gn);
    row_mut(kg, neg.tail).scaled_add(-lr, &gn);
    kg.relations.row_mut(neg.relation).scaled_add(lr, &gn);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_translation_has_zero_distance() {
        assert_eq!(transe_distance(&[1.0, 2.0], &[0.5, -1.0], &[1.5, 1.0]), 0.0);
    }

    #[test]
    fn hinge_is_zero_beyond_margin() {
        assert_eq!(triple_hinge(1.0, 0.0, 1.0), 0.0);
        assert_eq!(triple_hinge(1.0, 0.0, 2.5), 0.0);
        assert!((triple_hinge(1.0, 0.2, 0.7) - 0.5).abs() < 1e-12);
    }

    fn fixture() -> HeteroGraph {
        // 3 users, 4 items, 3 attributes: 5 user-item + 5 attribute-item triples
        HeteroGraph {
            n_users: 3,
            n_items: 4,
            n_attrs: 3,
            edges_uv: vec![(0, 0), (0, 1), (1, 2), (2, 3), (2, 0)],
            edges_av: vec![(0, 0), (0, 1), (1, 2), (2, 3), (1, 1)],
        }
    }

    #[test]
    fn training_separates_positive_from_corrupted() {
        let g = fixture();
        let cfg = TransEConfig { dim: 16, epochs: 200, seed: 3, ..Default::default() };
        let kg = train_transe(&g, &cfg);
        assert!(kg.all_finite());
        let d = |h: ndarray::ArrayView1<f64>, r: usize, t: ndarray::ArrayView1<f64>| {
            transe_distance(h.as_slice().unwrap(), kg.relations.row(r).as_slice().unwrap(), t.as_slice().unwrap())
        };
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for &(u, v) in &g.edges_uv {
            pos.push(d(kg.users.row(u), 0, kg.items.row(v)));
            for v2 in 0..g.n_items {
                if !g.edges_uv.contains(&(u, v2)) {
                    neg.push(d(kg.users.row(u), 0, kg.items.row(v2)));
                }
            }
        }
        for &(a, v) in &g.edges_av {
            pos.push(d(kg.items.row(v), 1, kg.attrs.row(a)));
            for a2 in 0..g.n_attrs {
                if !g.edges_av.contains(&(a2, v)) {
                    neg.push(d(kg.items.row(v), 1, kg.attrs.row(a2)));
                }
            }
        }
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        assert!(mean(&pos) < mean(&neg), "pos {} neg {}", mean(&pos), mean(&neg));
    }

    #[test]
    fn same_seed_is_bitwise_reproducible() {
        let cfg = TransEConfig { dim: 8, epochs: 20, ..Default::default() };
        assert_eq!(train_transe(&fixture(), &cfg), train_transe(&fixture(), &cfg));
    }
}
