use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{AttrState, ConvPolicyState};
use crate::autograd::{masked_softmax, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::recommender::Bound;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub lr: f64,
    /// Discount γ.
    pub gamma: f64,
    pub dagger_iterations: usize,
    pub dagger_max_pairs: usize,
    /// Episodes rolled out per DAgger iteration.
    pub dagger_episodes: usize,
    /// Passes over the aggregated dataset per DAgger iteration.
    pub dagger_epochs: usize,
    pub dagger_batch: usize,
    pub rl_iterations: usize,
    pub rl_batch_episodes: usize,
    pub center_returns: bool,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            hidden: 64,
            lr: 1e-3,
            gamma: 0.7,
            dagger_iterations: 5,
            dagger_max_pairs: 50_000,
            dagger_episodes: 400,
            dagger_epochs: 20,
            dagger_batch: 32,
            rl_iterations: 50,
            rl_batch_episodes: 32,
            center_returns: true,
            seed: 13,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("policy needs hidden > 0, lr > 0 and 0 <= gamma <= 1".into()));
        }
        Ok(())
    }
}

/// Two affine layers with a ReLU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub prefix: &'static str,
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl Mlp {
    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        params.insert_uniform(self.name("w1"), self.hidden, self.input, 1.0 / (self.input as f64).sqrt(), rng);
        params.insert(self.name("b1"), Mat::zeros((1, self.hidden)));
        params.insert_uniform(self.name("w2"), self.output, self.hidden, 1.0 / (self.hidden as f64).sqrt(), rng);
        params.insert(self.name("b2"), Mat::zeros((1, self.output)));
    }

    /// Row-batched logits on a tape.
    pub fn forward(&self, tape: &Tape, b: &Bound, x: Var) -> Var {
        let h = tape.relu(tape.add_row(tape.matmul_bt(x, b.get(&self.name("w1"))), b.get(&self.name("b1"))));
        tape.add_row(tape.matmul_bt(h, b.get(&self.name("w2"))), b.get(&self.name("b2")))
    }

    /// Logits of one input without a tape.
    pub fn logits(&self, params: &ParamSet, x: &[f64]) -> Vec<f64> {
        let p = |n: &str| params.get(&self.name(n)).unwrap_or_else(|| panic!("missing {}", self.name(n)));
        let x = ndarray::ArrayView1::from(x);
        let h = (p("w1").dot(&x) + p("b1").row(0)).mapv(|v| v.max(0.0));
        (p("w2").dot(&h) + p("b2").row(0)).to_vec()
    }
}

/// Attribute and conversation policy networks.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    pub n_attrs: usize,
    pub max_turns: usize,
    pub list_size: usize,
    pub hidden: usize,
    pub params: ParamSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    Greedy,
    Sample,
}

/// Conversation-agent output; index 0 is Ask, 1 is Recommend.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvChoice {
    Ask,
    Recommend,
}

impl ConvChoice {
    pub fn index(self) -> usize {
        match self {
            ConvChoice::Ask => 0,
            ConvChoice::Recommend => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            ConvChoice::Ask
        } else {
            ConvChoice::Recommend
        }
    }
}

impl PolicyNet {
    pub fn new(n_attrs: usize, max_turns: usize, list_size: usize, hidden: usize, seed: u64) -> Self {
        let mut net = PolicyNet { n_attrs, max_turns, list_size, hidden, params: ParamSet::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        net.attr_mlp().init(&mut net.params, &mut rng);
        net.conv_mlp().init(&mut net.params, &mut rng);
        net
    }

    pub fn attr_mlp(&self) -> Mlp {
        Mlp { prefix: "attr", input: AttrState::dim(self.n_attrs), hidden: self.hidden, output: self.n_attrs }
    }

    pub fn conv_mlp(&self) -> Mlp {
        Mlp { prefix: "conv", input: ConvPolicyState::dim(self.max_turns, self.list_size), hidden: self.hidden, output: 2 }
    }

    pub fn attr_logits(&self, s: &AttrState) -> Vec<f64> {
        self.attr_mlp().logits(&self.params, &s.features())
    }

    pub fn conv_logits(&self, s: &ConvPolicyState) -> [f64; 2] {
        let l = self.conv_mlp().logits(&self.params, &s.features());
        [l[0], l[1]]
    }
}

/// Greedy argmax with ties to the lowest index, or a draw from the masked softmax.
pub fn select_attr(logits: &[f64], mask: &[bool], mode: ActMode, rng: &mut impl Rng) -> Result<usize> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::NothingToAsk);
    }
    match mode {
        ActMode::Greedy => Ok(argmax_masked(logits, mask)),
        ActMode::Sample => {
            let z = Mat::from_shape_vec((1, logits.len()), logits.to_vec()).expect("shape");
            let p = masked_softmax(&z, Some(&[mask.to_vec()]));
            Ok(draw(p.row(0).as_slice().expect("contiguous"), rng))
        }
    }
}

pub fn select_conv(logits: [f64; 2], mode: ActMode, rng: &mut impl Rng) -> ConvChoice {
    match mode {
        ActMode::Greedy => ConvChoice::from_index(argmax_masked(&logits, &[true, true])),
        ActMode::Sample => {
            let p = crate::autograd::sigmoid(logits[0] - logits[1]);
            if rng.random::<f64>() < p {
                ConvChoice::Ask
            } else {
                ConvChoice::Recommend
            }
        }
    }
}

pub fn argmax_masked(values: &[f64], mask: &[bool]) -> usize {
    let mut best: Option<usize> = None;
    for (i, (&v, &m)) in values.iter().zip(mask).enumerate() {
        if m && best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best.expect("no unmasked entry")
}

fn draw(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            acc += pi;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// `Σ_i w_i · (−ln π(a_i | s_i))` over rows; masked entries carry zero
/// probability. With `w_i = G_i` this is the negated REINFORCE surrogate, with
/// `w_i = 1` the imitation loss.
pub fn weighted_nll(tape: &Tape, b: &Bound, mlp: &Mlp, features: &[Vec<f64>], masks: Option<&[Vec<bool>]>, actions: &[usize], weights: &[f64]) -> Var {
    let x = Mat::from_shape_fn((features.len(), mlp.input), |(r, c)| features[r][c]);
    let logits = mlp.forward(tape, b, tape.constant(x));
    tape.cross_entropy(logits, actions, weights, masks)
}
