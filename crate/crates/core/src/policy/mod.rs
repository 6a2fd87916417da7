//! Attribute and conversation agents: state features, MLP policies, expert
//! rules, imitation pretraining and policy-gradient training.

mod agent;
mod expert;
mod features;
mod net;
mod train;

pub use agent::{compose_action, interest_context, run_episode, top_k_candidates, Agent, Decision, MscaaAgent};
pub use expert::{ask_probability, expert_attr_rule, expert_conv_argmax, expert_conv_rule};
pub use features::{binary_entropy, candidate_entropies, entropy_of_attribute, history_kind, len_bin, AttrState, ConvPolicyState, HIS_KINDS, LEN_BINS};
pub use net::{argmax_masked, select_attr, select_conv, weighted_nll, ActMode, ConvChoice, Mlp, PolicyConfig, PolicyNet};
pub use train::{
    collect_trajectory, conv_agreement, dagger_pretrain, fit_imitation, reinforce_update, surrogate_gradient, surrogate_losses, train_policy, DaggerReport,
    ImitationSet, RlReport, Trajectory,
};
