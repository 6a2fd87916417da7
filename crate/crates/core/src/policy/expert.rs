use rand::Rng;

use super::features::AttrState;
use super::net::{argmax_masked, ConvChoice};
use crate::error::{Error, Result};

/// Max User-like while nothing is accepted, Max Entropy afterwards; ties to
/// the lowest index.
pub fn expert_attr_rule(state: &AttrState) -> Result<usize> {
    if !state.mask.iter().any(|&m| m) {
        return Err(Error::NothingToAsk);
    }
    let values = if state.act_num < 1.0 { &state.pre } else { &state.ent };
    Ok(argmax_masked(values, &state.mask))
}

pub fn ask_probability(turn: usize, max_turns: usize) -> f64 {
    (1.0 - turn as f64 / max_turns as f64).clamp(0.0, 1.0)
}

/// Ask with probability `1 − t/T`.
pub fn expert_conv_rule(turn: usize, max_turns: usize, rng: &mut impl Rng) -> ConvChoice {
    if rng.random::<f64>() < ask_probability(turn, max_turns) {
        ConvChoice::Ask
    } else {
        ConvChoice::Recommend
    }
}

/// Most probable expert action; `None` when both are equally likely.
pub fn expert_conv_argmax(turn: usize, max_turns: usize) -> Option<ConvChoice> {
    let p = ask_probability(turn, max_turns);
    if p > 0.5 {
        Some(ConvChoice::Ask)
    } else if p < 0.5 {
        Some(ConvChoice::Recommend)
    } else {
        None
    }
}
