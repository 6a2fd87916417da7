//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on a [`Tape`] is a 2-D matrix. Operations record their inputs
//! and enough saved state to run the backward pass; [`Tape::backward`] then
//! returns one gradient per bound parameter. The op set is exactly what the
//! recommender and the policy networks need, nothing more.

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{s, Array2, Axis};

use crate::params::ParamSet;

pub type Mat = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Compressed sparse row matrix, used for normalized graph adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    pub rows: usize,
    pub cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl Csr {
    /// Builds from `(row, col, value)` triplets. Duplicate coordinates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < rows && c < cols, "triplet ({r},{c}) out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            last = Some((r, c));
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(v);
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Csr { rows, cols, indptr, indices, values }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.indptr[r]..self.indptr[r + 1];
        self.indices[range.clone()].iter().copied().zip(self.values[range].iter().copied())
    }

    pub fn transpose(&self) -> Csr {
        let mut trips = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                trips.push((c, r, v));
            }
        }
        Csr::from_triplets(self.cols, self.rows, trips)
    }

    pub fn matmul(&self, x: &Mat) -> Mat {
        assert_eq!(self.cols, x.nrows(), "sparse matmul shape mismatch");
        let mut out = Mat::zeros((self.rows, x.ncols()));
        for r in 0..self.rows {
            let mut out_row = out.row_mut(r);
            for (c, v) in self.row(r) {
                out_row.scaled_add(v, &x.row(c));
            }
        }
        out
    }
}

/// A sparse operator together with its transpose, shared between forward and
/// backward passes.
#[derive(Clone, Debug)]
pub struct SparseOp {
    pub forward: Csr,
    pub transposed: Csr,
}

impl SparseOp {
    pub fn new(forward: Csr) -> Arc<Self> {
        let transposed = forward.transpose();
        Arc::new(SparseOp { forward, transposed })
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddTiled(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    SpMM(Arc<SparseOp>, Var),
    Gather(Var, Arc<Vec<usize>>),
    SegmentMean(Var, Arc<Vec<Vec<usize>>>),
    Interleave(Vec<Var>),
    RowDot(Var, Var),
    Sum(Var),
    LayerNorm { x: Var, xhat: Mat, inv_std: Vec<f64> },
    Attention(Box<AttentionSaved>),
    CrossEntropy(Box<CrossEntropySaved>),
}

#[derive(Clone, Debug)]
struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    block: usize,
    heads: usize,
    /// Softmax weights per (block, head), `block x block`.
    probs: Vec<Mat>,
}

#[derive(Clone, Debug)]
struct CrossEntropySaved {
    logits: Var,
    targets: Vec<usize>,
    weights: Vec<f64>,
    probs: Mat,
}

struct Node {
    value: Mat,
    op: Op,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    fn map1(&self, a: Var, f: impl FnOnce(&Mat) -> Mat) -> Mat {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value)
    }

    fn map2(&self, a: Var, b: Var, f: impl FnOnce(&Mat, &Mat) -> Mat) -> Mat {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    pub fn constant(&self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers every tensor of `params` as a differentiable leaf, in order.
    pub fn bind(&self, params: &ParamSet) -> Vec<Var> {
        params
            .values()
            .iter()
            .enumerate()
            .map(|(i, m)| self.push(m.clone(), Op::Param(i)))
            .collect()
    }

    pub fn value(&self, v: Var) -> Mat {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Mat) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.with_value(v, |m| {
            assert_eq!(m.dim(), (1, 1), "not a scalar");
            m[[0, 0]]
        })
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.with_value(v, |m| m.dim())
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = self.map2(a, b, |x, y| x.dot(y));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`; with `b` a weight matrix this applies `W x` to each row `x` of `a`.
    pub fn matmul_bt(&self, a: Var, b: Var) -> Var {
        let out = self.map2(a, b, |x, y| x.dot(&y.t()));
        self.push(out, Op::MatMulBT(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = self.map2(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = self.map2(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = self.map2(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds the `1 x C` row `b` to every row of `a`.
    pub fn add_row(&self, a: Var, b: Var) -> Var {
        let out = self.map2(a, b, |x, y| {
            assert_eq!(y.nrows(), 1);
            x + y
        });
        self.push(out, Op::AddRow(a, b))
    }

    /// Multiplies every row of `a` elementwise by the `1 x C` row `b`.
    pub fn mul_row(&self, a: Var, b: Var) -> Var {
        let out = self.map2(a, b, |x, y| {
            assert_eq!(y.nrows(), 1);
            x * y
        });
        self.push(out, Op::MulRow(a, b))
    }

    /// Adds `p` (P rows) to `a` (B·P rows), repeating `p` once per block of P rows.
    pub fn add_tiled(&self, a: Var, p: Var) -> Var {
        let out = self.map2(a, p, |x, y| {
            let period = y.nrows();
            assert!(period > 0 && x.nrows() % period == 0, "add_tiled: rows not a multiple");
            let mut out = x.clone();
            for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                row += &y.row(i % period);
            }
            out
        });
        self.push(out, Op::AddTiled(a, p))
    }

    /// `scale · a + shift`.
    pub fn affine(&self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.map1(a, |x| x.mapv(|v| scale * v + shift));
        self.push(out, Op::Affine(a, scale))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.map1(a, |x| x.mapv(|v| v.max(0.0)));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.map1(a, |x| x.mapv(sigmoid));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = self.map1(a, |x| x.mapv(f64::tanh));
        self.push(out, Op::Tanh(a))
    }

    /// `ln(1 + e^x)`, so `softplus(-x) = -ln σ(x)`.
    pub fn softplus(&self, a: Var) -> Var {
        let out = self.map1(a, |x| x.mapv(softplus));
        self.push(out, Op::Softplus(a))
    }

    pub fn spmm(&self, op: &Arc<SparseOp>, a: Var) -> Var {
        let out = self.map1(a, |x| op.forward.matmul(x));
        self.push(out, Op::SpMM(Arc::clone(op), a))
    }

    pub fn gather(&self, a: Var, idx: Vec<usize>) -> Var {
        let out = self.map1(a, |x| x.select(Axis(0), &idx));
        self.push(out, Op::Gather(a, Arc::new(idx)))
    }

    /// Row `g` of the output is the mean of rows `groups[g]` of `a`; empty groups give zeros.
    pub fn segment_mean(&self, a: Var, groups: Vec<Vec<usize>>) -> Var {
        let out = self.map1(a, |x| {
            let mut out = Mat::zeros((groups.len(), x.ncols()));
            for (g, members) in groups.iter().enumerate() {
                if members.is_empty() {
                    continue;
                }
                let w = 1.0 / members.len() as f64;
                let mut row = out.row_mut(g);
                for &m in members {
                    row.scaled_add(w, &x.row(m));
                }
            }
            out
        });
        self.push(out, Op::SegmentMean(a, Arc::new(groups)))
    }

    /// Interleaves equally shaped inputs: output row `b·k + j` is row `b` of `parts[j]`.
    pub fn interleave(&self, parts: &[Var]) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let k = parts.len();
            let (rows, cols) = nodes[parts[0].0].value.dim();
            let mut out = Mat::zeros((rows * k, cols));
            for (j, p) in parts.iter().enumerate() {
                let v = &nodes[p.0].value;
                assert_eq!(v.dim(), (rows, cols), "interleave: shape mismatch");
                for b in 0..rows {
                    out.row_mut(b * k + j).assign(&v.row(b));
                }
            }
            out
        };
        self.push(out, Op::Interleave(parts.to_vec()))
    }

    /// Rowwise dot product, `R x 1`.
    pub fn row_dot(&self, a: Var, b: Var) -> Var {
        let out = self.map2(a, b, |x, y| {
            assert_eq!(x.dim(), y.dim(), "row_dot: shape mismatch");
            (x * y).sum_axis(Axis(1)).insert_axis(Axis(1))
        });
        self.push(out, Op::RowDot(a, b))
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = self.map1(a, |x| Mat::from_elem((1, 1), x.sum()));
        self.push(out, Op::Sum(a))
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&self, a: Var, eps: f64) -> Var {
        let (xhat, inv_std) = self.map1_pair(a, |x| {
            let cols = x.ncols() as f64;
            let mut xhat = x.clone();
            let mut inv_std = Vec::with_capacity(x.nrows());
            for mut row in xhat.rows_mut() {
                let mean = row.sum() / cols;
                row.mapv_inplace(|v| v - mean);
                let var = row.iter().map(|v| v * v).sum::<f64>() / cols;
                let is = 1.0 / (var + eps).sqrt();
                row.mapv_inplace(|v| v * is);
                inv_std.push(is);
            }
            (xhat, inv_std)
        });
        self.push(xhat.clone(), Op::LayerNorm { x: a, xhat, inv_std })
    }

    fn map1_pair<R>(&self, a: Var, f: impl FnOnce(&Mat) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value)
    }

    /// Multi-head scaled dot-product attention applied independently within
    /// consecutive blocks of `block` rows. Keys/values whose `key_mask` entry is
    /// false are excluded; a query with no visible key yields a zero row.
    pub fn block_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        block: usize,
        heads: usize,
        key_mask: &[bool],
    ) -> Var {
        let (out, probs) = {
            let nodes = self.nodes.borrow();
            let (qm, km, vm) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            let (rows, dim) = qm.dim();
            assert!(block > 0 && rows % block == 0, "attention: rows not a multiple of block");
            assert!(heads > 0 && dim % heads == 0, "attention: dim not divisible by heads");
            assert_eq!(key_mask.len(), rows, "attention: mask length");
            let dh = dim / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut out = Mat::zeros((rows, dim));
            let mut probs = Vec::with_capacity(rows / block * heads);
            for b in 0..rows / block {
                let r0 = b * block;
                let mask = &key_mask[r0..r0 + block];
                for h in 0..heads {
                    let c0 = h * dh;
                    let qb = qm.slice(s![r0..r0 + block, c0..c0 + dh]);
                    let kb = km.slice(s![r0..r0 + block, c0..c0 + dh]);
                    let vb = vm.slice(s![r0..r0 + block, c0..c0 + dh]);
                    let mut p = qb.dot(&kb.t()) * scale;
                    for mut row in p.rows_mut() {
                        let max = row
                            .iter()
                            .zip(mask)
                            .filter(|(_, &m)| m)
                            .map(|(&x, _)| x)
                            .fold(f64::NEG_INFINITY, f64::max);
                        if max == f64::NEG_INFINITY {
                            row.fill(0.0);
                            continue;
                        }
                        let mut z = 0.0;
                        for (x, &m) in row.iter_mut().zip(mask) {
                            *x = if m { (*x - max).exp() } else { 0.0 };
                            z += *x;
                        }
                        row.mapv_inplace(|x| x / z);
                    }
                    out.slice_mut(s![r0..r0 + block, c0..c0 + dh]).assign(&p.dot(&vb));
                    probs.push(p);
                }
            }
            (out, probs)
        };
        self.push(out, Op::Attention(Box::new(AttentionSaved { q, k, v, block, heads, probs })))
    }

    /// `Σ_r weights[r] · (−ln softmax(logits_r)[targets[r]])` where the softmax
    /// runs over unmasked columns only. Masked columns get probability exactly 0.
    pub fn cross_entropy(
        &self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
        mask: Option<&[Vec<bool>]>,
    ) -> Var {
        let (loss, probs) = self.map1_pair(logits, |z| {
            assert_eq!(z.nrows(), targets.len());
            assert_eq!(z.nrows(), weights.len());
            let probs = masked_softmax(z, mask);
            let mut loss = 0.0;
            for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                let p = probs[[r, t]];
                assert!(p > 0.0 || w == 0.0, "cross_entropy: target column masked");
                if w != 0.0 {
                    loss -= w * log_softmax_at(z.row(r), mask.map(|m| m[r].as_slice()), t);
                }
            }
            (loss, probs)
        });
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::CrossEntropy(Box::new(CrossEntropySaved {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            })),
        )
    }

    /// Reverse pass from the scalar `loss`. Returns one gradient per parameter
    /// bound with [`Tape::bind`] (zeros for parameters the loss does not touch).
    pub fn backward(&self, loss: Var, params: &ParamSet) -> Vec<Mat> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.dim(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Mat::ones((1, 1)));
        let mut out: Vec<Mat> = params.values().iter().map(|m| Mat::zeros(m.dim())).collect();

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(i) => out[*i] += &g,
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.dot(&val(*b).t()));
                    acc(&mut grads, *b, val(*a).t().dot(&g));
                }
                Op::MatMulBT(a, b) => {
                    acc(&mut grads, *a, g.dot(val(*b)));
                    acc(&mut grads, *b, g.t().dot(val(*a)));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * val(*b));
                    acc(&mut grads, *b, &g * val(*a));
                }
                Op::AddRow(a, b) => {
                    acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, b) => {
                    let gb = (&g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, &g * val(*b));
                    acc(&mut grads, *b, gb);
                }
                Op::AddTiled(a, p) => {
                    let period = val(*p).nrows();
                    let mut gp = Mat::zeros(val(*p).dim());
                    for (i, row) in g.rows().into_iter().enumerate() {
                        let mut target = gp.row_mut(i % period);
                        target += &row;
                    }
                    acc(&mut grads, *p, gp);
                    acc(&mut grads, *a, g);
                }
                Op::Affine(a, s) => acc(&mut grads, *a, g * *s),
                Op::Relu(a) => {
                    let mask = val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut grads, *a, g * mask);
                }
                Op::Sigmoid(a) => {
                    let d = node.value.mapv(|y| y * (1.0 - y));
                    acc(&mut grads, *a, g * d);
                }
                Op::Tanh(a) => {
                    let d = node.value.mapv(|y| 1.0 - y * y);
                    acc(&mut grads, *a, g * d);
                }
                Op::Softplus(a) => {
                    let d = val(*a).mapv(sigmoid);
                    acc(&mut grads, *a, g * d);
                }
                Op::SpMM(op, a) => acc(&mut grads, *a, op.transposed.matmul(&g)),
                Op::Gather(a, idx) => {
                    let mut ga = Mat::zeros(val(*a).dim());
                    for (r, &src) in idx.iter().enumerate() {
                        let mut target = ga.row_mut(src);
                        target += &g.row(r);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SegmentMean(a, groups) => {
                    let mut ga = Mat::zeros(val(*a).dim());
                    for (gi, members) in groups.iter().enumerate() {
                        if members.is_empty() {
                            continue;
                        }
                        let w = 1.0 / members.len() as f64;
                        for &m in members {
                            ga.row_mut(m).scaled_add(w, &g.row(gi));
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Interleave(parts) => {
                    let k = parts.len();
                    let rows = g.nrows() / k;
                    for (j, p) in parts.iter().enumerate() {
                        let idx: Vec<usize> = (0..rows).map(|b| b * k + j).collect();
                        acc(&mut grads, *p, g.select(Axis(0), &idx));
                    }
                }
                Op::RowDot(a, b) => {
                    let ga = val(*b) * &g;
                    let gb = val(*a) * &g;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Sum(a) => {
                    let s = g[[0, 0]];
                    acc(&mut grads, *a, Mat::from_elem(val(*a).dim(), s));
                }
                Op::LayerNorm { x, xhat, inv_std } => {
                    let cols = xhat.ncols() as f64;
                    let mut gx = Mat::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let gy = g.row(r);
                        let xh = xhat.row(r);
                        let mean_g = gy.sum() / cols;
                        let mean_gx = gy.dot(&xh) / cols;
                        let mut row = gx.row_mut(r);
                        for c in 0..xhat.ncols() {
                            row[c] = inv_std[r] * (gy[c] - mean_g - xh[c] * mean_gx);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Attention(saved) => {
                    let (gq, gk, gv) = attention_backward(saved, &g, val(saved.q), val(saved.k), val(saved.v));
                    acc(&mut grads, saved.q, gq);
                    acc(&mut grads, saved.k, gk);
                    acc(&mut grads, saved.v, gv);
                }
                Op::CrossEntropy(saved) => {
                    let s = g[[0, 0]];
                    let mut gz = saved.probs.clone();
                    for (r, (&t, &w)) in saved.targets.iter().zip(&saved.weights).enumerate() {
                        let mut row = gz.row_mut(r);
                        row[t] -= 1.0;
                        row *= w * s;
                    }
                    acc(&mut grads, saved.logits, gz);
                }
            }
        }
        out
    }
}

fn attention_backward(saved: &AttentionSaved, g: &Mat, qm: &Mat, km: &Mat, vm: &Mat) -> (Mat, Mat, Mat) {
    let (rows, dim) = qm.dim();
    let block = saved.block;
    let heads = saved.heads;
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = Mat::zeros((rows, dim));
    let mut gk = Mat::zeros((rows, dim));
    let mut gv = Mat::zeros((rows, dim));
    for b in 0..rows / block {
        let r0 = b * block;
        for h in 0..heads {
            let c0 = h * dh;
            let p = &saved.probs[b * heads + h];
            let go = g.slice(s![r0..r0 + block, c0..c0 + dh]);
            let qb = qm.slice(s![r0..r0 + block, c0..c0 + dh]);
            let kb = km.slice(s![r0..r0 + block, c0..c0 + dh]);
            let vb = vm.slice(s![r0..r0 + block, c0..c0 + dh]);
            gv.slice_mut(s![r0..r0 + block, c0..c0 + dh]).assign(&p.t().dot(&go));
            let gp = go.dot(&vb.t());
            let mut gs = gp.clone();
            for i in 0..block {
                let inner: f64 = (0..block).map(|j| gp[[i, j]] * p[[i, j]]).sum();
                for j in 0..block {
                    gs[[i, j]] = p[[i, j]] * (gp[[i, j]] - inner) * scale;
                }
            }
            gq.slice_mut(s![r0..r0 + block, c0..c0 + dh]).assign(&gs.dot(&kb));
            gk.slice_mut(s![r0..r0 + block, c0..c0 + dh]).assign(&gs.t().dot(&qb));
        }
    }
    (gq, gk, gv)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Row-wise softmax restricted to unmasked columns.
pub fn masked_softmax(z: &Mat, mask: Option<&[Vec<bool>]>) -> Mat {
    let mut p = z.clone();
    for (r, mut row) in p.rows_mut().into_iter().enumerate() {
        let m = mask.map(|m| m[r].as_slice());
        let visible = |c: usize| m.is_none_or(|m| m[c]);
        let max = (0..row.len()).filter(|&c| visible(c)).map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for c in 0..row.len() {
            row[c] = if visible(c) { (row[c] - max).exp() } else { 0.0 };
            total += row[c];
        }
        if total > 0.0 {
            row.mapv_inplace(|x| x / total);
        }
    }
    p
}

fn log_softmax_at(row: ndarray::ArrayView1<f64>, mask: Option<&[bool]>, t: usize) -> f64 {
    let visible = |c: usize| mask.is_none_or(|m| m[c]);
    let max = (0..row.len()).filter(|&c| visible(c)).map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + (0..row.len()).filter(|&c| visible(c)).map(|c| (row[c] - max).exp()).sum::<f64>().ln();
    row[t] - lse
}
