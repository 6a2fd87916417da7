//! Conversation MDP: state, transitions, rewards and episode records.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::Catalog;
use crate::error::{Error, Result};
use crate::simulator::{AttrResponse, RecResponse, Session, SimUserState};

pub const EPISODE_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub rec_acc: f64,
    pub rec_rej: f64,
    pub ask_acc: f64,
    pub ask_rej: f64,
    pub ask_unk: f64,
    pub quit: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { rec_acc: 1.0, rec_rej: -0.1, ask_acc: 0.01, ask_rej: -0.1, ask_unk: -0.1, quit: -0.3 }
    }
}

impl RewardConfig {
    pub fn as_array(&self) -> [f64; 6] {
        [self.rec_acc, self.rec_rej, self.ask_acc, self.ask_rej, self.ask_unk, self.quit]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    /// Maximum turns T.
    pub max_turns: usize,
    /// Recommendation list size K.
    pub list_size: usize,
    pub rewards: RewardConfig,
    /// Drop items carrying a rejected attribute from `V_cand`.
    pub reject_filters_items: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig { max_turns: 10, list_size: 10, rewards: RewardConfig::default(), reject_filters_items: false }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_turns == 0 || self.list_size == 0 {
            return Err(Error::Config("T and K must be at least 1".into()));
        }
        if !(self.rewards.rec_acc > 0.0 && self.rewards.quit < 0.0) {
            return Err(Error::Config("rewards must satisfy r_rec_acc > 0 > r_quit".into()));
        }
        Ok(())
    }
}

/// System move. `I` is a dense index in memory and an external id in logs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action<I = usize> {
    Ask { attribute: I },
    Recommend { items: Vec<I> },
}

impl<I> Action<I> {
    pub fn is_ask(&self) -> bool {
        matches!(self, Action::Ask { .. })
    }

    pub fn map<J>(&self, f: impl Fn(&I) -> J) -> Action<J> {
        match self {
            Action::Ask { attribute } => Action::Ask { attribute: f(attribute) },
            Action::Recommend { items } => Action::Recommend { items: items.iter().map(f).collect() },
        }
    }
}

/// User answer to the last action.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Feedback<I = usize> {
    Accept,
    Reject,
    Unknown,
    /// Accepted item with its 1-based rank in the list.
    AcceptItem { item: I, rank: usize },
    RejectAll,
}

impl<I> Feedback<I> {
    pub fn map<J>(&self, f: impl Fn(&I) -> J) -> Feedback<J> {
        match self {
            Feedback::Accept => Feedback::Accept,
            Feedback::Reject => Feedback::Reject,
            Feedback::Unknown => Feedback::Unknown,
            Feedback::AcceptItem { item, rank } => Feedback::AcceptItem { item: f(item), rank: *rank },
            Feedback::RejectAll => Feedback::RejectAll,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnEvent<I = usize> {
    pub turn: usize,
    pub action: Action<I>,
    pub feedback: Feedback<I>,
    pub reward: f64,
}

/// Conversation state of the current subsession.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvState {
    /// Turn of the next action (1-based).
    pub turn: usize,
    pub a_acc: BTreeSet<usize>,
    pub a_rej: BTreeSet<usize>,
    pub a_unknown: BTreeSet<usize>,
    pub v_rej: BTreeSet<usize>,
    pub v_cand: BTreeSet<usize>,
    pub a_cand: BTreeSet<usize>,
    pub activated: bool,
    pub activation_turn: Option<usize>,
    pub transcript: Vec<TurnEvent>,
    pub done: bool,
    /// `(turn, rank)` of the accepted recommendation.
    pub success: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub feedback: Feedback,
    pub reward: f64,
    pub done: bool,
}

impl ConvState {
    pub fn reset(n_items: usize, n_attrs: usize) -> Self {
        ConvState {
            turn: 1,
            a_acc: BTreeSet::new(),
            a_rej: BTreeSet::new(),
            a_unknown: BTreeSet::new(),
            v_rej: BTreeSet::new(),
            v_cand: (0..n_items).collect(),
            a_cand: (0..n_attrs).collect(),
            activated: false,
            activation_turn: None,
            transcript: Vec::new(),
            done: false,
            success: None,
        }
    }

    /// Checks an action against the candidate sets.
    pub fn check_action(&self, action: &Action, config: &EnvConfig) -> Result<()> {
        if self.done {
            return Err(Error::Validation("episode already finished".into()));
        }
        match action {
            Action::Ask { attribute } if !self.a_cand.contains(attribute) => Err(Error::Validation(format!("attribute {attribute} is not askable"))),
            Action::Recommend { items } => {
                if items.is_empty() || items.len() > config.list_size {
                    return Err(Error::Validation(format!("recommendation list must hold 1..={} items", config.list_size)));
                }
                let set: BTreeSet<usize> = items.iter().copied().collect();
                if set.len() != items.len() {
                    return Err(Error::Validation("duplicate items in recommendation".into()));
                }
                if !set.is_subset(&self.v_cand) {
                    return Err(Error::Validation("recommended item outside candidate set".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Applies an action and the user's answer. `activation_hit` marks an
    /// accepted attribute as the one that activated the user.
    pub fn apply_feedback(&mut self, action: &Action, feedback: &Feedback, activation_hit: bool, item_attrs: &[Vec<usize>], config: &EnvConfig) -> Result<StepResult> {
        self.check_action(action, config)?;
        let r = &config.rewards;
        let mut success = None;
        let reward = match (action, feedback) {
            (Action::Ask { attribute: a }, Feedback::Accept) => {
                self.a_acc.insert(*a);
                self.v_cand.retain(|&v| item_attrs[v].contains(a));
                let remaining: BTreeSet<usize> = self.v_cand.iter().flat_map(|&v| item_attrs[v].iter().copied()).collect();
                self.a_cand.remove(a);
                self.a_cand.retain(|x| remaining.contains(x));
                if activation_hit && !self.activated {
                    self.activated = true;
                    self.activation_turn = Some(self.turn);
                }
                r.ask_acc
            }
            (Action::Ask { attribute: a }, Feedback::Reject) => {
                self.a_rej.insert(*a);
                self.a_cand.remove(a);
                if config.reject_filters_items {
                    self.v_cand.retain(|&v| !item_attrs[v].contains(a));
                }
                r.ask_rej
            }
            (Action::Ask { attribute: a }, Feedback::Unknown) => {
                self.a_unknown.insert(*a);
                self.a_cand.remove(a);
                r.ask_unk
            }
            (Action::Recommend { items }, Feedback::AcceptItem { item, rank }) => {
                if items.get(rank.wrapping_sub(1)) != Some(item) {
                    return Err(Error::Validation(format!("item {item} is not at rank {rank} of the list")));
                }
                success = Some((self.turn, *rank));
                r.rec_acc
            }
            (Action::Recommend { items }, Feedback::RejectAll) => {
                for v in items {
                    self.v_rej.insert(*v);
                    self.v_cand.remove(v);
                }
                r.rec_rej
            }
            (a, f) => return Err(Error::Validation(format!("feedback {f:?} does not answer {}", if a.is_ask() { "a question" } else { "a recommendation" }))),
        };
        let mut reward = reward;
        let done = if success.is_some() {
            self.success = success;
            true
        } else if self.turn >= config.max_turns || self.v_cand.is_empty() {
            reward += r.quit;
            true
        } else {
            false
        };
        self.transcript.push(TurnEvent { turn: self.turn, action: action.clone(), feedback: feedback.clone(), reward });
        self.done = done;
        if !done {
            self.turn += 1;
        }
        Ok(StepResult { feedback: feedback.clone(), reward, done })
    }

    /// Simulated step: the simulator answers, then the transition applies.
    pub fn step(&mut self, action: &Action, sim: &mut SimUserState, item_attrs: &[Vec<usize>], config: &EnvConfig) -> Result<StepResult> {
        self.check_action(action, config)?;
        let was_active = sim.activated;
        let feedback = match action {
            Action::Ask { attribute } => match sim.respond_attribute(*attribute) {
                AttrResponse::Accept => Feedback::Accept,
                AttrResponse::Reject => Feedback::Reject,
                AttrResponse::Unknown => Feedback::Unknown,
            },
            Action::Recommend { items } => match sim.respond_recommendation(items) {
                RecResponse::Accept(rank) => Feedback::AcceptItem { item: items[rank - 1], rank },
                RecResponse::RejectAll => Feedback::RejectAll,
            },
        };
        self.apply_feedback(action, &feedback, sim.activated && !was_active, item_attrs, config)
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.transcript.iter().map(|e| e.reward).collect()
    }
}

/// `G_t = r_t + γ·G_{t+1}`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut g = 0.0;
    for (i, r) in rewards.iter().enumerate().rev() {
        g = r + gamma * g;
        out[i] = g;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Simulated,
    Human,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Success { turn: usize, rank: usize },
    Failure { turns: usize },
}

/// One finished episode with external ids; one JSON line per episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub schema_version: u32,
    pub session_id: String,
    pub mode: Mode,
    #[serde(default)]
    pub agent: String,
    pub user: String,
    pub previous_items: Vec<String>,
    /// Absent for human sessions.
    #[serde(default)]
    pub target: Option<String>,
    pub turns: Vec<TurnEvent<String>>,
    pub outcome: Outcome,
    /// Turn at which an activation attribute was asked and accepted.
    #[serde(default)]
    pub activation_turn: Option<usize>,
    /// Whether activation was observed at all; false for human logs without
    /// activation flags.
    #[serde(default = "default_true")]
    pub activation_tracked: bool,
}

fn default_true() -> bool {
    true
}

impl EpisodeRecord {
    pub fn from_state(state: &ConvState, session: &Session, catalog: &Catalog, mode: Mode, agent: &str) -> Self {
        let target = (mode == Mode::Simulated).then(|| session.target());
        Self::from_parts(state, &session.id, session.user, session.previous_items(), target, catalog, mode, agent)
    }

    /// Record for an episode without a `Session`, e.g. a live human session.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(state: &ConvState, session_id: &str, user: usize, previous_items: &[usize], target: Option<usize>, catalog: &Catalog, mode: Mode, agent: &str) -> Self {
        let items = &catalog.ids.items;
        let attrs = &catalog.ids.attributes;
        let turns = state
            .transcript
            .iter()
            .map(|e| TurnEvent {
                turn: e.turn,
                action: match &e.action {
                    Action::Ask { attribute } => Action::Ask { attribute: attrs[*attribute].clone() },
                    Action::Recommend { items: list } => Action::Recommend { items: list.iter().map(|&v| items[v].clone()).collect() },
                },
                feedback: e.feedback.map(|&v| items[v].clone()),
                reward: e.reward,
            })
            .collect();
        let outcome = match state.success {
            Some((turn, rank)) => Outcome::Success { turn, rank },
            None => Outcome::Failure { turns: state.transcript.len() },
        };
        EpisodeRecord {
            schema_version: EPISODE_SCHEMA_VERSION,
            session_id: session_id.to_string(),
            mode,
            agent: agent.to_string(),
            user: catalog.ids.users[user].clone(),
            previous_items: previous_items.iter().map(|&v| items[v].clone()).collect(),
            target: target.map(|v| items[v].clone()),
            turns,
            outcome,
            activation_turn: state.activation_turn,
            activation_tracked: mode == Mode::Simulated || state.activation_turn.is_some(),
        }
    }

    pub fn success(&self) -> Option<(usize, usize)> {
        match self.outcome {
            Outcome::Success { turn, rank } => Some((turn, rank)),
            Outcome::Failure { .. } => None,
        }
    }
}

pub fn records_to_jsonl(records: &[EpisodeRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out += &serde_json::to_string(r)?;
        out.push('\n');
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[EpisodeRecord]) -> Result<()> {
    std::fs::write(path, records_to_jsonl(records)?).map_err(|e| Error::io(path, e))
}

pub fn append_record(path: &Path, record: &EpisodeRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(record)?).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EpisodeRecord = serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        if rec.schema_version != EPISODE_SCHEMA_VERSION {
            return Err(Error::Parse { line: i + 1, msg: format!("unsupported schema version {}", rec.schema_version) });
        }
        out.push(rec);
    }
    Ok(out)
}
