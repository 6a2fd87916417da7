//! Simulated users: sessions from chronological histories, activation
//! attributes from translation-embedding affinity, and per-turn feedback.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::Catalog;
use crate::error::Result;
use crate::graph_embed::KgEmbeddings;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatorConfig {
    pub min_session_len: usize,
    pub max_session_len: usize,
    pub activation_count: usize,
    /// Sessions drawn per eligible user for evaluation.
    pub sessions_per_user: usize,
    /// Sessions drawn per user from the training split (pretraining, policy training).
    pub train_sessions_per_user: usize,
    pub seed: u64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        SimulatorConfig {
            min_session_len: 2,
            max_session_len: 4,
            activation_count: 2,
            sessions_per_user: 1,
            train_sessions_per_user: 4,
            seed: 23,
        }
    }
}

impl SimulatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_session_len < 2 || self.min_session_len > self.max_session_len {
            return Err(crate::Error::Config(format!(
                "session length bounds must satisfy 2 <= N_min <= N_max (got {}, {})",
                self.min_session_len, self.max_session_len
            )));
        }
        if self.activation_count == 0 {
            return Err(crate::Error::Config("activation_count must be positive".into()));
        }
        Ok(())
    }
}

/// Ordered subsessions of one user. The last subsession is the current one;
/// the others supply short-term context.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub user: usize,
    /// Target item of each subsession, chronological.
    pub targets: Vec<usize>,
    /// Oracle attribute set of each target.
    pub oracle: Vec<Vec<usize>>,
    /// Activation attributes of the current target (sorted).
    pub activation: Vec<usize>,
}

impl Session {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn target(&self) -> usize {
        *self.targets.last().expect("empty session")
    }

    pub fn target_attrs(&self) -> &[usize] {
        self.oracle.last().expect("empty session")
    }

    pub fn previous_items(&self) -> &[usize] {
        &self.targets[..self.targets.len() - 1]
    }

    pub fn previous_attr_sets(&self) -> &[Vec<usize>] {
        &self.oracle[..self.oracle.len() - 1]
    }
}

/// JSON fixture form with external ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionJson {
    #[serde(default)]
    pub id: String,
    pub user: String,
    pub targets: Vec<String>,
    pub activation: Vec<String>,
}

impl SessionJson {
    pub fn from_session(s: &Session, catalog: &Catalog) -> Self {
        SessionJson {
            id: s.id.clone(),
            user: catalog.ids.users[s.user].clone(),
            targets: s.targets.iter().map(|&v| catalog.ids.items[v].clone()).collect(),
            activation: s.activation.iter().map(|&a| catalog.ids.attributes[a].clone()).collect(),
        }
    }

    pub fn to_session(&self, catalog: &Catalog) -> Result<Session> {
        let targets = self.targets.iter().map(|v| catalog.ids.item(v)).collect::<Result<Vec<_>>>()?;
        let mut activation = self.activation.iter().map(|a| catalog.ids.attribute(a)).collect::<Result<Vec<_>>>()?;
        activation.sort_unstable();
        Ok(Session {
            id: self.id.clone(),
            user: catalog.ids.user(&self.user)?,
            oracle: targets.iter().map(|&v| catalog.item_attrs[v].clone()).collect(),
            targets,
            activation,
        })
    }
}

/// Draws `count` sessions from one user's chronological item list. Session
/// length is `min(Random(N_min, N_max), M_u)`; the first session starts at
/// the first interaction, further sessions at uniform random offsets.
/// Activation attributes are left empty. Returns nothing when `M_u < 2`.
pub fn build_sessions(user: usize, items: &[usize], catalog: &Catalog, config: &SimulatorConfig, count: usize, rng: &mut impl Rng) -> Vec<Session> {
    let m = items.len();
    if m < 2 {
        log::debug!("user {user}: {m} interaction(s), too few for a session");
        return Vec::new();
    }
    (0..count)
        .map(|k| {
            let n = rng.random_range(config.min_session_len..=config.max_session_len).min(m);
            let start = if k == 0 { 0 } else { rng.random_range(0..=m - n) };
            let targets = items[start..start + n].to_vec();
            Session {
                id: format!("{}#{k}", catalog.ids.users[user]),
                user,
                oracle: targets.iter().map(|&v| catalog.item_attrs[v].clone()).collect(),
                targets,
                activation: Vec::new(),
            }
        })
        .collect()
}

/// `U_u·A_a + (Σ_j V_{v^j}·A_a)/(n − 1)` for attribute `a`.
pub fn affinity(session: &Session, kg: &KgEmbeddings, a: usize) -> f64 {
    let attr = kg.attrs.row(a);
    let prev = session.previous_items();
    let context: f64 = prev.iter().map(|&v| kg.items.row(v).dot(&attr)).sum::<f64>() / prev.len() as f64;
    kg.users.row(session.user).dot(&attr) + context
}

/// Top-`count` oracle attributes of the current target by affinity (ties by
/// ascending index), returned sorted.
pub fn generate_activation_attributes(session: &Session, kg: &KgEmbeddings, count: usize) -> Vec<usize> {
    assert!(session.len() >= 2, "activation needs at least one previous subsession");
    let mut scored: Vec<(usize, f64)> = session.target_attrs().iter().map(|&a| (a, affinity(session, kg, a))).collect();
    scored.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    let mut top: Vec<usize> = scored.into_iter().take(count.max(1)).map(|(a, _)| a).collect();
    top.sort_unstable();
    top
}

/// Sessions for every eligible user of `catalog`, with activation attributes.
/// User `u` draws from its own RNG stream derived from `seed`.
pub fn build_all_sessions(catalog: &Catalog, kg: &KgEmbeddings, config: &SimulatorConfig, count: usize, seed: u64) -> Vec<Session> {
    let mut out = Vec::new();
    for u in 0..catalog.n_users() {
        let mut rng = crate::rng_stream(seed, u as u64);
        for mut s in build_sessions(u, &catalog.user_items(u), catalog, config, count, &mut rng) {
            s.activation = generate_activation_attributes(&s, kg, config.activation_count);
            out.push(s);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttrResponse {
    Accept,
    Reject,
    Unknown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecResponse {
    /// 1-based rank of the target in the list.
    Accept(usize),
    RejectAll,
}

/// Single-episode simulated user.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimUserState {
    pub target: usize,
    pub oracle: Vec<usize>,
    pub activation: Vec<usize>,
    pub activated: bool,
}

impl SimUserState {
    pub fn new(session: &Session) -> Self {
        SimUserState {
            target: session.target(),
            oracle: session.target_attrs().to_vec(),
            activation: session.activation.clone(),
            activated: false,
        }
    }

    /// Before activation only activation attributes get an answer (Accept,
    /// which activates the user); everything else is Unknown. Afterwards the
    /// oracle set decides Accept/Reject.
    pub fn respond_attribute(&mut self, asked: usize) -> AttrResponse {
        if !self.activated {
            if self.activation.contains(&asked) {
                self.activated = true;
                AttrResponse::Accept
            } else {
                AttrResponse::Unknown
            }
        } else if self.oracle.contains(&asked) {
            AttrResponse::Accept
        } else {
            AttrResponse::Reject
        }
    }

    pub fn respond_recommendation(&self, items: &[usize]) -> RecResponse {
        assert!(!items.is_empty(), "empty recommendation list");
        let mut sorted = items.to_vec();
        sorted.sort_unstable();
        assert!(sorted.windows(2).all(|w| w[0] != w[1]), "duplicate items in recommendation list");
        match items.iter().position(|&v| v == self.target) {
            Some(p) => RecResponse::Accept(p + 1),
            None => RecResponse::RejectAll,
        }
    }
}
