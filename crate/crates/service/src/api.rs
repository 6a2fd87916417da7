//! Request and response bodies. All ids are external catalog ids.

use serde::{Deserialize, Serialize};

use msmcr_core::environment::{Mode, TurnEvent};
use msmcr_core::evalkit::Metrics;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CreateSession {
    pub user: String,
    /// Defaults to `human`.
    #[serde(default)]
    pub mode: Option<Mode>,
    /// Explicit previous-subsession items (human mode). When absent, the
    /// context comes from the user's held-out session.
    #[serde(default)]
    pub previous_items: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    pub item: String,
    pub attributes: Vec<String>,
}

/// A system move.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionPayload {
    Ask { attribute: String, display_name: String },
    Recommend { items: Vec<ItemView> },
}

/// Human answer to the pending action. Simulated sessions take no body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "feedback", rename_all = "snake_case")]
pub enum FeedbackBody {
    Accept {
        /// The human marks this attribute as the one that activated them.
        #[serde(default)]
        activated: bool,
    },
    Reject,
    Unknown,
    AcceptItem { item: String },
    RejectAll,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuccessView {
    pub turn: usize,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepView {
    pub turn: usize,
    pub feedback: msmcr_core::environment::Feedback<String>,
    pub reward: f64,
    pub candidate_items: usize,
    pub done: bool,
    pub success: Option<SuccessView>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Awaiting {
    System,
    Feedback,
    Nothing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub mode: Mode,
    pub user: String,
    pub previous_items: Vec<String>,
    pub turn: usize,
    pub awaiting: Awaiting,
    pub pending: Option<ActionPayload>,
    pub candidate_items: usize,
    pub accepted_attributes: Vec<String>,
    pub rejected_attributes: Vec<String>,
    pub unknown_attributes: Vec<String>,
    pub transcript: Vec<TurnEvent<String>>,
    pub done: bool,
    pub success: Option<SuccessView>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsView {
    pub episodes: usize,
    pub simulated: Option<Metrics>,
    pub human: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
