//! Named parameter tensors and first-order optimizers.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;

/// Ordered collection of named `f64` matrices. Order is insertion order and is
/// the order in which [`crate::autograd::Tape::bind`] registers leaves.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Mat>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        self.names.len() - 1
    }

    /// Inserts a matrix drawn uniformly from `(-bound, bound)`.
    pub fn insert_uniform(&mut self, name: impl Into<String>, rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> usize {
        let m = Mat::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound));
        self.insert(name, m)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, m)| NamedTensor { name: n.clone(), rows: m.nrows(), cols: m.ncols(), data: m.iter().copied().collect() })
            .collect()
    }

    pub fn from_tensors(tensors: Vec<NamedTensor>) -> Result<Self, String> {
        let mut set = ParamSet::default();
        for t in tensors {
            if t.data.len() != t.rows * t.cols {
                return Err(format!("tensor {} has {} values for shape {}x{}", t.name, t.data.len(), t.rows, t.cols));
            }
            let m = Mat::from_shape_vec((t.rows, t.cols), t.data).map_err(|e| e.to_string())?;
            if set.index.contains_key(&t.name) {
                return Err(format!("duplicate tensor {}", t.name));
            }
            set.insert(t.name, m);
        }
        Ok(set)
    }
}

/// Serialized form of one parameter tensor (row-major data).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

pub trait Optimizer {
    /// Applies one descent step. Parameters with `frozen[i] == true` are left untouched.
    fn step(&mut self, params: &mut ParamSet, grads: &[Mat], frozen: &[bool]);
}

/// Plain stochastic gradient descent.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamSet, grads: &[Mat], frozen: &[bool]) {
        for (i, (p, g)) in params.values_mut().iter_mut().zip(grads).enumerate() {
            if frozen.get(i).copied().unwrap_or(false) {
                continue;
            }
            p.scaled_add(-self.lr, g);
        }
    }
}

/// Adaptive-moment descent with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamSet, grads: &[Mat], frozen: &[bool]) {
        if self.m.is_empty() {
            self.m = params.values().iter().map(|p| Mat::zeros(p.dim())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            if frozen.get(i).copied().unwrap_or(false) {
                continue;
            }
            let g = &grads[i];
            let (b1, b2) = (self.beta1, self.beta2);
            self.m[i].zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            self.v[i].zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let (lr, eps) = (self.lr, self.eps);
            ndarray::Zip::from(p).and(&self.m[i]).and(&self.v[i]).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }
}
