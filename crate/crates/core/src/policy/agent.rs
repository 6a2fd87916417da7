use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::features::{candidate_entropies, AttrState, ConvPolicyState};
use super::net::{select_attr, select_conv, ActMode, ConvChoice, PolicyNet};
use crate::environment::{Action, ConvState, EnvConfig};
use crate::error::{Error, Result};
use crate::recommender::{FrozenRecommender, InterestContext, ScoreTable};
use crate::simulator::{Session, SimUserState};

/// Anything that picks the next system action.
pub trait Agent: Send + Sync {
    fn name(&self) -> &str;
    fn act(&self, session: &Session, state: &ConvState, rng: &mut ChaCha8Rng) -> Result<Action>;
}

/// Plays one episode of `session`'s current subsession against the simulator.
pub fn run_episode(agent: &dyn Agent, session: &Session, item_attrs: &[Vec<usize>], n_attrs: usize, env: &EnvConfig, rng: &mut ChaCha8Rng) -> Result<ConvState> {
    let mut state = ConvState::reset(item_attrs.len(), n_attrs);
    let mut sim = SimUserState::new(session);
    while !state.done {
        let action = agent.act(session, &state, rng)?;
        state.step(&action, &mut sim, item_attrs, env)?;
    }
    Ok(state)
}

/// Recommender context for the current state of a conversation.
pub fn interest_context(user: usize, prev_items: &[usize], prev_attr_sets: &[Vec<usize>], state: &ConvState) -> InterestContext {
    InterestContext {
        user,
        prev_items: prev_items.to_vec(),
        prev_attr_sets: prev_attr_sets.to_vec(),
        rejected_items: state.v_rej.iter().copied().collect(),
        accepted_attrs: state.a_acc.iter().copied().collect(),
        rejected_attrs: state.a_rej.iter().copied().collect(),
    }
}

/// Top-K candidates by score, ties to the lower index.
pub fn top_k_candidates(scores: &ScoreTable, k: usize) -> Vec<usize> {
    scores.top_items(k)
}

/// Everything computed for one turn; serialized by the trace tooling.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Decision {
    pub turn: usize,
    pub scores: ScoreTable,
    pub attr_state: AttrState,
    pub attr_logits: Vec<f64>,
    pub attr_choice: Option<usize>,
    pub conv_state: ConvPolicyState,
    pub conv_logits: [f64; 2],
    pub conv_choice: ConvChoice,
    pub action: Action,
    /// Ask was chosen with nothing left to ask.
    pub fallback: bool,
}

/// Attribute agent, conversation agent and the frozen recommender.
#[derive(Clone, Debug)]
pub struct MscaaAgent {
    pub rec: Arc<FrozenRecommender>,
    pub net: PolicyNet,
    pub item_attrs: Arc<Vec<Vec<usize>>>,
    pub env: EnvConfig,
    pub mode: ActMode,
}

impl MscaaAgent {
    pub fn n_attrs(&self) -> usize {
        self.net.n_attrs
    }

    pub fn decide(&self, ctx: &InterestContext, state: &ConvState, mode: ActMode, rng: &mut ChaCha8Rng) -> Result<Decision> {
        if state.v_cand.is_empty() {
            return Err(Error::Validation("no candidate items left".into()));
        }
        let scores = self.rec.score(ctx, &state.v_cand, &state.a_cand);
        let ent = candidate_entropies(state, &self.item_attrs, self.n_attrs());
        let attr_state = AttrState::build(state, &scores, &ent, self.env.max_turns);
        let attr_logits = self.net.attr_logits(&attr_state);
        let attr_choice = match select_attr(&attr_logits, &attr_state.mask, mode, rng) {
            Ok(a) => Some(a),
            Err(Error::NothingToAsk) => None,
            Err(e) => return Err(e),
        };
        let next = attr_choice.map(|a| (attr_state.pre[a], attr_state.ent[a]));
        let conv_state = ConvPolicyState::build(state, &scores, next, self.env.max_turns, self.env.list_size);
        let conv_logits = self.net.conv_logits(&conv_state);
        let conv_choice = select_conv(conv_logits, mode, rng);
        let (action, fallback) = compose_action(conv_choice, attr_choice, &scores, self.env.list_size);
        if fallback {
            log::debug!("turn {}: ask chosen with empty A_cand, recommending instead", state.turn);
        }
        Ok(Decision { turn: state.turn, scores, attr_state, attr_logits, attr_choice, conv_state, conv_logits, conv_choice, action, fallback })
    }

    pub fn decide_for_session(&self, session: &Session, state: &ConvState, mode: ActMode, rng: &mut ChaCha8Rng) -> Result<Decision> {
        let ctx = interest_context(session.user, session.previous_items(), session.previous_attr_sets(), state);
        self.decide(&ctx, state, mode, rng)
    }
}

/// Turns the two agents' outputs into an environment action. An Ask without
/// an attribute falls back to Recommend (second value `true`).
pub fn compose_action(choice: ConvChoice, attr: Option<usize>, scores: &ScoreTable, list_size: usize) -> (Action, bool) {
    match (choice, attr) {
        (ConvChoice::Ask, Some(a)) => (Action::Ask { attribute: a }, false),
        (c, _) => (Action::Recommend { items: top_k_candidates(scores, list_size) }, c == ConvChoice::Ask),
    }
}

impl Agent for MscaaAgent {
    fn name(&self) -> &str {
        "mscaa"
    }

    fn act(&self, session: &Session, state: &ConvState, rng: &mut ChaCha8Rng) -> Result<Action> {
        Ok(self.decide_for_session(session, state, self.mode, rng)?.action)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fallback_when_nothing_to_ask() {
        let scores = ScoreTable { item_scores: [(3, 0.1), (5, 0.7), (9, 0.7)].into(), attr_scores: Default::default() };
        let (a, fb) = compose_action(ConvChoice::Ask, None, &scores, 2);
        assert_eq!(a, Action::Recommend { items: vec![5, 9] });
        assert!(fb);
        let (a, fb) = compose_action(ConvChoice::Ask, Some(4), &scores, 2);
        assert_eq!(a, Action::Ask { attribute: 4 });
        assert!(!fb);
        let (_, fb) = compose_action(ConvChoice::Recommend, Some(4), &scores, 2);
        assert!(!fb);
    }
}
