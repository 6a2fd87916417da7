use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{Action, ConvState};
use crate::error::Result;
use crate::policy::{argmax_masked, ask_probability, candidate_entropies, interest_context, Agent};
use crate::recommender::FrozenRecommender;
use crate::simulator::Session;

/// Ask probability per turn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AskSchedule {
    /// `1 − t/T`.
    Linear,
    Constant { p: f64 },
}

impl AskSchedule {
    pub fn probability(&self, turn: usize, max_turns: usize) -> f64 {
        match self {
            AskSchedule::Linear => ask_probability(turn, max_turns),
            AskSchedule::Constant { p } => *p,
        }
    }
}

/// Max-entropy question or top-K recommendation, chosen at random per turn.
pub struct MaxEntropyAgent {
    pub rec: Arc<FrozenRecommender>,
    pub item_attrs: Arc<Vec<Vec<usize>>>,
    pub n_attrs: usize,
    pub max_turns: usize,
    pub list_size: usize,
    pub schedule: AskSchedule,
}

impl MaxEntropyAgent {
    /// Highest-entropy candidate attribute, ties to the lowest index.
    pub fn max_entropy_attribute(&self, state: &ConvState) -> Option<usize> {
        if state.a_cand.is_empty() {
            return None;
        }
        let ent = candidate_entropies(state, &self.item_attrs, self.n_attrs);
        let mask: Vec<bool> = (0..self.n_attrs).map(|a| state.a_cand.contains(&a)).collect();
        Some(argmax_masked(&ent, &mask))
    }
}

impl Agent for MaxEntropyAgent {
    fn name(&self) -> &str {
        "maxe"
    }

    fn act(&self, session: &Session, state: &ConvState, rng: &mut ChaCha8Rng) -> Result<Action> {
        let ask = rng.random::<f64>() < self.schedule.probability(state.turn, self.max_turns);
        if ask {
            if let Some(a) = self.max_entropy_attribute(state) {
                return Ok(Action::Ask { attribute: a });
            }
        }
        let ctx = interest_context(session.user, session.previous_items(), session.previous_attr_sets(), state);
        let scores = self.rec.score(&ctx, &state.v_cand, &Default::default());
        Ok(Action::Recommend { items: scores.top_items(self.list_size) })
    }
}

/// Coin-flip between a random question and `K` random candidate items.
pub struct RandomAgent {
    pub list_size: usize,
}

impl Agent for RandomAgent {
    fn name(&self) -> &str {
        "random"
    }

    fn act(&self, _session: &Session, state: &ConvState, rng: &mut ChaCha8Rng) -> Result<Action> {
        let attrs: Vec<usize> = state.a_cand.iter().copied().collect();
        if !attrs.is_empty() && rng.random_bool(0.5) {
            return Ok(Action::Ask { attribute: *attrs.choose(rng).expect("non-empty") });
        }
        let items: Vec<usize> = state.v_cand.iter().copied().collect();
        Ok(Action::Recommend { items: items.choose_multiple(rng, self.list_size).copied().collect() })
    }
}

/// Constructive agent with access to the hidden target: asks an activation
/// attribute, then the remaining target attributes, and recommends the whole
/// candidate set once it fits in one list.
pub struct OracleAgent {
    pub list_size: usize,
}

impl Agent for OracleAgent {
    fn name(&self) -> &str {
        "oracle"
    }

    fn act(&self, session: &Session, state: &ConvState, _rng: &mut ChaCha8Rng) -> Result<Action> {
        let top = || state.v_cand.iter().copied().take(self.list_size).collect();
        if state.v_cand.len() <= self.list_size {
            return Ok(Action::Recommend { items: top() });
        }
        let pool: &[usize] = if state.activated { session.target_attrs() } else { &session.activation };
        match pool.iter().find(|a| state.a_cand.contains(a)) {
            Some(&a) => Ok(Action::Ask { attribute: a }),
            None => Ok(Action::Recommend { items: top() }),
        }
    }
}
