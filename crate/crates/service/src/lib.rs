//! REST service that runs live conversations against a frozen policy bundle.
//!
//! Turns strictly alternate: `POST /turn` produces a system action, `POST
//! /feedback` answers it. In simulated mode the held-out simulator answers and
//! the feedback body is empty.

pub mod api;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use msmcr_core::catalog::Catalog;
use msmcr_core::environment::{append_record, read_records, Action, ConvState, EpisodeRecord, Feedback, Mode};
use msmcr_core::evalkit::compute_metrics;
use msmcr_core::policy::{interest_context, ActMode, MscaaAgent};
use msmcr_core::simulator::{Session, SimUserState};

use api::*;

/// Immutable model snapshot shared by all sessions.
pub struct Bundle {
    pub catalog: Arc<Catalog>,
    pub agent: MscaaAgent,
    /// Held-out sessions keyed by user index; the first one per user is used.
    pub held_out: BTreeMap<usize, Session>,
}

impl Bundle {
    pub fn new(catalog: Arc<Catalog>, agent: MscaaAgent, sessions: Vec<Session>) -> Self {
        let mut held_out = BTreeMap::new();
        for s in sessions {
            held_out.entry(s.user).or_insert(s);
        }
        Bundle { catalog, agent, held_out }
    }
}

#[derive(Clone, Debug)]
pub struct ServiceOptions {
    pub idle_timeout: Duration,
    pub episode_log: PathBuf,
}

struct Live {
    id: String,
    mode: Mode,
    user: usize,
    previous_items: Vec<usize>,
    previous_attr_sets: Vec<Vec<usize>>,
    target: Option<usize>,
    sim: Option<SimUserState>,
    state: ConvState,
    pending: Option<Action>,
    updated: Instant,
}

pub struct AppState {
    bundle: Arc<Bundle>,
    options: ServiceOptions,
    sessions: Mutex<HashMap<String, Arc<tokio::sync::Mutex<Live>>>>,
}

impl AppState {
    pub fn new(bundle: Arc<Bundle>, options: ServiceOptions) -> Arc<Self> {
        Arc::new(AppState { bundle, options, sessions: Mutex::new(HashMap::new()) })
    }

    /// Drops sessions idle longer than the timeout as of `now`; returns the
    /// number removed. Sessions currently locked by a request are kept.
    pub fn sweep(&self, now: Instant) -> usize {
        let mut map = self.sessions.lock().expect("session map poisoned");
        let before = map.len();
        map.retain(|_, s| match s.try_lock() {
            Ok(live) => now.saturating_duration_since(live.updated) <= self.options.idle_timeout,
            Err(_) => true,
        });
        before - map.len()
    }

    pub fn live_sessions(&self) -> usize {
        self.sessions.lock().expect("session map poisoned").len()
    }

    fn get(&self, id: &str) -> Result<Arc<tokio::sync::Mutex<Live>>, ApiError> {
        self.sessions.lock().expect("session map poisoned").get(id).cloned().ok_or_else(|| ApiError::not_found(format!("no session `{id}`")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(m: impl Into<String>) -> Self {
        ApiError { status: StatusCode::BAD_REQUEST, message: m.into() }
    }
    fn not_found(m: impl Into<String>) -> Self {
        ApiError { status: StatusCode::NOT_FOUND, message: m.into() }
    }
    fn conflict(m: impl Into<String>) -> Self {
        ApiError { status: StatusCode::CONFLICT, message: m.into() }
    }
    fn internal(m: impl Into<String>) -> Self {
        ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, message: m.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/turn", post(next_turn))
        .route("/v1/sessions/{id}/feedback", post(post_feedback))
        .route("/v1/metrics", get(metrics))
        .with_state(state)
}

/// Serves until the process is stopped, sweeping idle sessions every minute.
pub async fn serve(state: Arc<AppState>, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    let sweeper = state.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            let n = sweeper.sweep(Instant::now());
            if n > 0 {
                log::info!("expired {n} idle session(s)");
            }
        }
    });
    axum::serve(listener, router(state)).await
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> ApiResult<SessionView> {
    let req: CreateSession = parse_json(&body)?;
    let b = &app.bundle;
    let cat = &b.catalog;
    let user = cat.ids.user(&req.user).map_err(|e| ApiError::not_found(e.to_string()))?;
    let mode = req.mode.unwrap_or(Mode::Human);
    let held_out = b.held_out.get(&user);
    let (previous_items, target, sim) = match (mode, req.previous_items) {
        (Mode::Simulated, Some(_)) => return Err(ApiError::bad_request("simulated sessions take their context from held-out data")),
        (Mode::Simulated, None) => {
            let s = held_out.ok_or_else(|| ApiError::not_found(format!("user `{}` has no held-out session", req.user)))?;
            (s.previous_items().to_vec(), Some(s.target()), Some(SimUserState::new(s)))
        }
        (Mode::Human, Some(ids)) => {
            if ids.is_empty() {
                return Err(ApiError::bad_request("previous_items must not be empty"));
            }
            let items = ids.iter().map(|id| cat.ids.item(id)).collect::<Result<Vec<_>, _>>().map_err(|e| ApiError::bad_request(e.to_string()))?;
            (items, None, None)
        }
        (Mode::Human, None) => {
            let s = held_out.ok_or_else(|| ApiError::bad_request(format!("user `{}` has no held-out session; pass previous_items", req.user)))?;
            (s.previous_items().to_vec(), None, None)
        }
    };
    let live = Live {
        id: uuid::Uuid::new_v4().to_string(),
        mode,
        user,
        previous_attr_sets: previous_items.iter().map(|&v| cat.item_attrs[v].clone()).collect(),
        previous_items,
        target,
        sim,
        state: ConvState::reset(cat.n_items(), cat.n_attrs()),
        pending: None,
        updated: Instant::now(),
    };
    let view = view(b, &live);
    app.sessions.lock().expect("session map poisoned").insert(live.id.clone(), Arc::new(tokio::sync::Mutex::new(live)));
    Ok(Json(view))
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<SessionView> {
    let s = app.get(&id)?;
    let live = s.lock().await;
    Ok(Json(view(&app.bundle, &live)))
}

async fn next_turn(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<ActionPayload> {
    let s = app.get(&id)?;
    let mut live = s.lock().await;
    if live.state.done {
        return Err(ApiError::conflict("session has finished"));
    }
    if live.pending.is_some() {
        return Err(ApiError::conflict("awaiting feedback on the previous action"));
    }
    let b = &app.bundle;
    let ctx = interest_context(live.user, &live.previous_items, &live.previous_attr_sets, &live.state);
    // greedy selection never draws from the generator
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let decision = b.agent.decide(&ctx, &live.state, ActMode::Greedy, &mut rng).map_err(|e| ApiError::internal(e.to_string()))?;
    let payload = payload(&b.catalog, &decision.action);
    live.pending = Some(decision.action);
    live.updated = Instant::now();
    Ok(Json(payload))
}

async fn post_feedback(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<StepView> {
    let s = app.get(&id)?;
    let mut live = s.lock().await;
    let live = &mut *live;
    if live.state.done {
        return Err(ApiError::conflict("session has finished"));
    }
    let action = live.pending.clone().ok_or_else(|| ApiError::conflict("no pending system action; request a turn first"))?;
    let b = &app.bundle;
    let cat = &b.catalog;
    let env = &b.agent.env;
    let result = match live.mode {
        Mode::Simulated => {
            if !body.iter().all(u8::is_ascii_whitespace) && body.as_ref() != b"{}" {
                return Err(ApiError::bad_request("simulated sessions are answered by the simulator; send no body"));
            }
            let sim = live.sim.as_mut().expect("simulated session has a simulator");
            live.state.step(&action, sim, &cat.item_attrs, env)
        }
        Mode::Human => {
            let fb: FeedbackBody = parse_json(&body)?;
            let (feedback, hit) = human_feedback(cat, &action, fb)?;
            live.state.apply_feedback(&action, &feedback, hit, &cat.item_attrs, env)
        }
    }
    .map_err(|e| ApiError::bad_request(e.to_string()))?;
    live.pending = None;
    live.updated = Instant::now();
    if result.done {
        let record = EpisodeRecord::from_parts(&live.state, &live.id, live.user, &live.previous_items, live.target, cat, live.mode, "mscaa");
        append_record(&app.options.episode_log, &record).map_err(|e| ApiError::internal(e.to_string()))?;
    }
    Ok(Json(StepView {
        turn: live.state.transcript.last().map_or(live.state.turn, |e| e.turn),
        feedback: result.feedback.map(|&v| cat.ids.items[v].clone()),
        reward: result.reward,
        candidate_items: live.state.v_cand.len(),
        done: result.done,
        success: live.state.success.map(|(turn, rank)| SuccessView { turn, rank }),
    }))
}

fn human_feedback(cat: &Catalog, action: &Action, fb: FeedbackBody) -> Result<(Feedback, bool), ApiError> {
    let mismatch = || ApiError::bad_request(format!("feedback does not answer the pending {}", if action.is_ask() { "question" } else { "recommendation" }));
    match (action, fb) {
        (Action::Ask { .. }, FeedbackBody::Accept { activated }) => Ok((Feedback::Accept, activated)),
        (Action::Ask { .. }, FeedbackBody::Reject) => Ok((Feedback::Reject, false)),
        (Action::Ask { .. }, FeedbackBody::Unknown) => Ok((Feedback::Unknown, false)),
        (Action::Recommend { items }, FeedbackBody::AcceptItem { item }) => {
            let v = cat.ids.item(&item).map_err(|e| ApiError::bad_request(e.to_string()))?;
            let rank = items.iter().position(|&x| x == v).ok_or_else(|| ApiError::bad_request(format!("item `{item}` was not recommended")))? + 1;
            Ok((Feedback::AcceptItem { item: v, rank }, false))
        }
        (Action::Recommend { .. }, FeedbackBody::RejectAll) => Ok((Feedback::RejectAll, false)),
        _ => Err(mismatch()),
    }
}

async fn metrics(State(app): State<Arc<AppState>>) -> ApiResult<MetricsView> {
    let path = &app.options.episode_log;
    let records = if path.exists() { read_records(path).map_err(|e| ApiError::internal(e.to_string()))? } else { Vec::new() };
    let env = &app.bundle.agent.env;
    let of = |mode: Mode| -> Result<Option<_>, ApiError> {
        let subset: Vec<EpisodeRecord> = records.iter().filter(|r| r.mode == mode).cloned().collect();
        if subset.is_empty() {
            return Ok(None);
        }
        compute_metrics(&subset, env.max_turns, env.list_size).map(Some).map_err(|e| ApiError::internal(e.to_string()))
    };
    Ok(Json(MetricsView { episodes: records.len(), simulated: of(Mode::Simulated)?, human: of(Mode::Human)? }))
}

fn payload(cat: &Catalog, action: &Action) -> ActionPayload {
    let attr = |a: usize| cat.ids.attributes[a].clone();
    match action {
        Action::Ask { attribute } => ActionPayload::Ask { attribute: attr(*attribute), display_name: attr(*attribute).replace('_', " ") },
        Action::Recommend { items } => ActionPayload::Recommend {
            items: items.iter().map(|&v| ItemView { item: cat.ids.items[v].clone(), attributes: cat.item_attrs[v].iter().map(|&a| attr(a)).collect() }).collect(),
        },
    }
}

fn view(b: &Bundle, live: &Live) -> SessionView {
    let cat = &b.catalog;
    let attrs = |set: &std::collections::BTreeSet<usize>| set.iter().map(|&a| cat.ids.attributes[a].clone()).collect();
    let record = EpisodeRecord::from_parts(&live.state, &live.id, live.user, &live.previous_items, None, cat, live.mode, "mscaa");
    SessionView {
        id: live.id.clone(),
        mode: live.mode,
        user: cat.ids.users[live.user].clone(),
        previous_items: record.previous_items,
        turn: live.state.turn,
        awaiting: if live.state.done {
            Awaiting::Nothing
        } else if live.pending.is_some() {
            Awaiting::Feedback
        } else {
            Awaiting::System
        },
        pending: live.pending.as_ref().map(|a| payload(cat, a)),
        candidate_items: live.state.v_cand.len(),
        accepted_attributes: attrs(&live.state.a_acc),
        rejected_attributes: attrs(&live.state.a_rej),
        unknown_attributes: attrs(&live.state.a_unknown),
        transcript: record.turns,
        done: live.state.done,
        success: live.state.success.map(|(turn, rank)| SuccessView { turn, rank }),
    }
}
