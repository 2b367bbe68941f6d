//! Session-based what-if HTTP API over a twin, an optional density guardian
//! and an optional policy.
//!
//! | method | path | body | response |
//! |---|---|---|---|
//! | GET | `/capabilities` | | [`Capabilities`] |
//! | POST | `/sessions` | optional [`CreateRequest`] | [`SessionView`] (201) |
//! | GET | `/sessions/{id}` | | [`SessionView`] |
//! | POST | `/sessions/{id}/step` | [`StepRequest`] | [`StepResult`] |
//! | POST | `/sessions/{id}/whatif` | [`WhatIfRequest`] | [`WhatIfResult`] |
//! | GET | `/sessions/{id}/suggest` | | [`Suggestion`] |
//! | DELETE | `/sessions/{id}` | | 204 |
//!
//! Errors are `{"error": "..."}` with 400 (validation), 404 (unknown or
//! expired session), 409 (no policy loaded) or 500.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::domain::{Feature, PLevel, StateWindow, Trajectory, N_ACTIONS};
use crate::error::{invalid, Error, Result};
use crate::guardian::{percentile, DensityModel};
use crate::metrics::{episode_acp, episode_weaning_score, is_stable, StabilityThresholds};
use crate::policy::{ConstantPolicy, Policy};
use crate::reward::physiological_reward;
use crate::rl::PolicyModel;
use crate::rng::derive_seed;
use crate::synth::{GeneratorConfig, SynthEnv};
use crate::twin::{forecast, rollout, AnyTwin};

pub const MAX_WHATIF_HORIZON: usize = 24;
pub const MAX_WHATIF_SAMPLES: usize = 100;
const WHATIF_STREAM: u64 = 0x5748_4154;

/// Models shared read-only by every session.
pub struct Models {
    pub twin: AnyTwin,
    pub guardian: Option<DensityModel>,
    pub policy: Option<PolicyModel>,
    /// Draws initial windows for sessions created without one.
    pub generator: SynthEnv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capabilities {
    pub twin: String,
    pub guardian: bool,
    pub policy: Option<String>,
    pub ood_flags: bool,
    pub suggestions: bool,
    pub max_horizon: usize,
    pub max_samples: usize,
    pub idle_timeout_secs: u64,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub state: Option<StateWindow>,
    /// Level applied during the initial window; defaults to the generator draw or P9.
    pub plevel: Option<PLevel>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRequest {
    pub plevel: PLevel,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhatIfRequest {
    /// Held fixed over the fan; the policy decides when absent.
    pub plevel: Option<PLevel>,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
}

fn default_horizon() -> usize {
    6
}

fn default_samples() -> usize {
    50
}

/// One committed step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub state: StateWindow,
    pub action: PLevel,
    pub reward: f64,
    pub next_state: StateWindow,
    pub u: Option<f64>,
    pub u_plus: Option<f64>,
    pub ood: bool,
    pub stable_clinical: bool,
    pub stable_gradient: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub seed: u64,
    /// Level in effect during the initial window.
    pub initial_plevel: PLevel,
    pub state: StateWindow,
    pub plevel: PLevel,
    pub steps: usize,
    pub history: Vec<HistoryEntry>,
    pub acp: f64,
    pub ws: f64,
    pub total_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub step: usize,
    pub action: PLevel,
    pub next_state: StateWindow,
    pub reward: f64,
    pub u: Option<f64>,
    pub u_plus: Option<f64>,
    pub ood: bool,
    pub stable_clinical: bool,
    pub stable_gradient: bool,
    pub acp: f64,
    pub ws: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub p10: Vec<f64>,
    pub p50: Vec<f64>,
    pub p90: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bands {
    /// Window means per step.
    pub map: Band,
    pub hr: Band,
    pub pulsatility: Band,
    pub reward: Band,
    /// WS of the rollout prefix ending at each step.
    pub ws: Band,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FanMember {
    pub states: Vec<StateWindow>,
    pub actions: Vec<PLevel>,
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfResult {
    pub plevel: Option<PLevel>,
    pub horizon: usize,
    pub n_samples: usize,
    pub trajectories: Vec<FanMember>,
    pub bands: Bands,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub plevel: PLevel,
    pub distribution: Vec<f64>,
    /// Guardian `u` per candidate level P2..P9; empty without a guardian.
    pub u: Vec<f64>,
    pub ood: Vec<bool>,
}

struct Session {
    seed: u64,
    initial: StateWindow,
    initial_plevel: PLevel,
    history: Vec<HistoryEntry>,
    last_used: Instant,
}

impl Session {
    fn state(&self) -> StateWindow {
        self.history.last().map_or(self.initial, |h| h.next_state)
    }

    fn plevel(&self) -> PLevel {
        self.history.last().map_or(self.initial_plevel, |h| h.action)
    }

    fn trajectory(&self) -> Result<Trajectory> {
        let mut states = vec![self.initial];
        states.extend(self.history.iter().map(|h| h.next_state));
        Trajectory::new(states, self.history.iter().map(|h| h.action).collect())
    }

    fn running_metrics(&self) -> Result<(f64, f64)> {
        if self.history.is_empty() {
            return Ok((0.0, 0.0));
        }
        let traj = self.trajectory()?;
        let p0 = self.initial_plevel;
        Ok((episode_acp(p0, &traj.actions)?, episode_weaning_score(p0, &traj, &StabilityThresholds::gradient())))
    }

    fn view(&self, id: &str) -> Result<SessionView> {
        let (acp, ws) = self.running_metrics()?;
        Ok(SessionView {
            id: id.to_string(),
            seed: self.seed,
            initial_plevel: self.initial_plevel,
            state: self.state(),
            plevel: self.plevel(),
            steps: self.history.len(),
            history: self.history.clone(),
            acp,
            ws,
            total_reward: self.history.iter().map(|h| h.reward).sum(),
        })
    }
}

type SessionRef = Arc<Mutex<Session>>;

/// Shared server state: immutable models plus the session table.
#[derive(Clone)]
pub struct AppState {
    models: Arc<Models>,
    sessions: Arc<Mutex<HashMap<String, SessionRef>>>,
    idle: Duration,
    counter: Arc<AtomicU64>,
}

impl AppState {
    pub fn new(models: Models, idle: Duration) -> Self {
        Self {
            models: Arc::new(models),
            sessions: Arc::new(Mutex::new(HashMap::new())),
            idle,
            counter: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn capabilities(&self) -> Capabilities {
        let m = &self.models;
        Capabilities {
            twin: m.twin.kind().to_string(),
            guardian: m.guardian.is_some(),
            policy: m.policy.as_ref().map(|p| p.algo.name().to_string()),
            ood_flags: m.guardian.is_some(),
            suggestions: m.policy.is_some(),
            max_horizon: MAX_WHATIF_HORIZON,
            max_samples: MAX_WHATIF_SAMPLES,
            idle_timeout_secs: self.idle.as_secs(),
        }
    }

    /// Drops sessions idle for longer than the timeout.
    pub fn expire_idle(&self) -> usize {
        let now = Instant::now();
        let mut table = self.sessions.lock();
        let before = table.len();
        table.retain(|_, s| s.try_lock().is_none_or(|s| now.duration_since(s.last_used) <= self.idle));
        before - table.len()
    }

    pub fn n_sessions(&self) -> usize {
        self.sessions.lock().len()
    }

    fn lookup(&self, id: &str) -> Result<SessionRef, ApiError> {
        self.expire_idle();
        self.sessions.lock().get(id).cloned().ok_or_else(|| ApiError::not_found(id))
    }

    fn create(&self, req: CreateRequest) -> Result<SessionView> {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let seed = req.seed.unwrap_or(n);
        let (initial, initial_plevel) = match req.state {
            Some(s) => (s, req.plevel.unwrap_or(PLevel::MAX)),
            None => {
                let ic = self.models.generator.init_patient(derive_seed(seed, 0));
                (ic.window, req.plevel.unwrap_or(ic.plevel))
            }
        };
        let id = format!("{:016x}{:04x}", derive_seed(seed ^ 0x5E55_1011, n), n & 0xffff);
        let session = Session { seed, initial, initial_plevel, history: Vec::new(), last_used: Instant::now() };
        let view = session.view(&id)?;
        self.expire_idle();
        self.sessions.lock().insert(id, Arc::new(Mutex::new(session)));
        Ok(view)
    }

    fn regularizer(&self, state: &StateWindow, action: PLevel) -> Result<Option<(f64, f64)>> {
        match &self.models.guardian {
            Some(g) => {
                let r = g.regularizer(state, action)?;
                Ok(Some((r.u, r.u_plus)))
            }
            None => Ok(None),
        }
    }

    fn step(&self, s: &mut Session, action: PLevel) -> Result<StepResult> {
        let state = s.state();
        let k = s.history.len() as u64;
        let next = forecast(&self.models.twin, &state, action, true, derive_seed(s.seed, 1 + k))?;
        let reg = self.regularizer(&state, action)?;
        let entry = HistoryEntry {
            state,
            action,
            reward: physiological_reward(&next),
            next_state: next,
            u: reg.map(|r| r.0),
            u_plus: reg.map(|r| r.1),
            ood: reg.is_some_and(|r| r.1 > 0.0),
            stable_clinical: is_stable(&next, &StabilityThresholds::clinical()),
            stable_gradient: is_stable(&next, &StabilityThresholds::gradient()),
        };
        s.history.push(entry.clone());
        let (acp, ws) = s.running_metrics()?;
        Ok(StepResult {
            step: s.history.len(),
            action,
            next_state: next,
            reward: entry.reward,
            u: entry.u,
            u_plus: entry.u_plus,
            ood: entry.ood,
            stable_clinical: entry.stable_clinical,
            stable_gradient: entry.stable_gradient,
            acp,
            ws,
        })
    }

    fn whatif(&self, s: &Session, req: &WhatIfRequest) -> Result<WhatIfResult, ApiError> {
        if !(1..=MAX_WHATIF_HORIZON).contains(&req.horizon) {
            return Err(invalid(format!("horizon must lie in 1..={MAX_WHATIF_HORIZON}")).into());
        }
        if !(1..=MAX_WHATIF_SAMPLES).contains(&req.n_samples) {
            return Err(invalid(format!("n_samples must lie in 1..={MAX_WHATIF_SAMPLES}")).into());
        }
        let fixed;
        let policy: &dyn Policy = match (req.plevel, &self.models.policy) {
            (Some(p), _) => {
                fixed = ConstantPolicy(p);
                &fixed
            }
            (None, Some(p)) => p,
            (None, None) => return Err(ApiError::conflict("no policy loaded; give a plevel")),
        };
        let state = s.state();
        let base = derive_seed(derive_seed(s.seed, WHATIF_STREAM), s.history.len() as u64);
        let mut members = Vec::with_capacity(req.n_samples);
        let mut series: [Vec<Vec<f64>>; 5] = Default::default();
        for i in 0..req.n_samples {
            let traj = rollout(&self.models.twin, &state, s.plevel(), policy, req.horizon, derive_seed(base, i as u64), true)?;
            let rewards: Vec<f64> = traj.states[1..].iter().map(physiological_reward).collect();
            let mut row: [Vec<f64>; 5] = Default::default();
            for t in 1..=req.horizon {
                let w = &traj.states[t];
                row[0].push(w.mean_of(Feature::Map));
                row[1].push(w.mean_of(Feature::Hr));
                row[2].push(w.mean_of(Feature::Pulsatility));
                row[3].push(rewards[t - 1]);
                let prefix = Trajectory::new(traj.states[..=t].to_vec(), traj.actions[..t].to_vec())?;
                row[4].push(episode_weaning_score(s.plevel(), &prefix, &StabilityThresholds::gradient()));
            }
            for (acc, r) in series.iter_mut().zip(row) {
                acc.push(r);
            }
            members.push(FanMember { states: traj.states[1..].to_vec(), actions: traj.actions, rewards });
        }
        let band = |rows: &[Vec<f64>]| -> Result<Band> {
            let mut b = Band { p10: Vec::new(), p50: Vec::new(), p90: Vec::new() };
            for t in 0..req.horizon {
                let col: Vec<f64> = rows.iter().map(|r| r[t]).collect();
                b.p10.push(percentile(&col, 10.0)?);
                b.p50.push(percentile(&col, 50.0)?);
                b.p90.push(percentile(&col, 90.0)?);
            }
            Ok(b)
        };
        Ok(WhatIfResult {
            plevel: req.plevel,
            horizon: req.horizon,
            n_samples: req.n_samples,
            trajectories: members,
            bands: Bands {
                map: band(&series[0])?,
                hr: band(&series[1])?,
                pulsatility: band(&series[2])?,
                reward: band(&series[3])?,
                ws: band(&series[4])?,
            },
        })
    }

    fn suggest(&self, s: &Session) -> Result<Suggestion, ApiError> {
        let policy = self.models.policy.as_ref().ok_or_else(|| ApiError::conflict("no policy loaded"))?;
        let state = s.state();
        let distribution = policy.distribution(&state).to_vec();
        let mut u = Vec::new();
        if let Some(g) = &self.models.guardian {
            for a in PLevel::all() {
                u.push(g.regularizer(&state, a)?.u);
            }
        }
        debug_assert!(u.is_empty() || u.len() == N_ACTIONS);
        Ok(Suggestion { plevel: policy.greedy(&state), distribution, ood: u.iter().map(|v| *v > 0.0).collect(), u })
    }
}

/// Error body `{"error": ...}` with an HTTP status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn not_found(id: &str) -> Self {
        Self { status: StatusCode::NOT_FOUND, message: format!("no session {id}") }
    }

    fn conflict(msg: &str) -> Self {
        Self { status: StatusCode::CONFLICT, message: msg.to_string() }
    }

    fn bad_request(msg: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, message: msg.into() }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::InvalidInput(_) | Error::Json(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self { status, message: e.to_string() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(e.to_string()))
}

/// Runs `f` on the locked session off the async executor.
async fn with_session<T, F>(state: &AppState, id: &str, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&AppState, &mut Session) -> Result<T, ApiError> + Send + 'static,
{
    let session = state.lookup(id)?;
    let state = state.clone();
    tokio::task::spawn_blocking(move || {
        let mut s = session.lock();
        s.last_used = Instant::now();
        f(&state, &mut s)
    })
    .await
    .map_err(|e| ApiError::from(Error::Internal(e.to_string())))?
}

async fn capabilities(State(state): State<AppState>) -> Json<Capabilities> {
    Json(state.capabilities())
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateRequest = if body.iter().all(u8::is_ascii_whitespace) { CreateRequest::default() } else { parse(&body)? };
    let view = state.create(req)?;
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let key = id.clone();
    with_session(&state, &key, move |_, s| Ok(s.view(&id)?)).await.map(Json)
}

async fn delete_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    match state.sessions.lock().remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::not_found(&id)),
    }
}

async fn step(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<StepResult>, ApiError> {
    let req: StepRequest = parse(&body)?;
    with_session(&state, &id, move |st, s| Ok(st.step(s, req.plevel)?)).await.map(Json)
}

async fn whatif(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<WhatIfResult>, ApiError> {
    let req: WhatIfRequest = parse(&body)?;
    with_session(&state, &id, move |st, s| st.whatif(s, &req)).await.map(Json)
}

async fn suggest(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Suggestion>, ApiError> {
    with_session(&state, &id, |st, s| st.suggest(s)).await.map(Json)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/capabilities", get(capabilities))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/step", post(step))
        .route("/sessions/{id}/whatif", post(whatif))
        .route("/sessions/{id}/suggest", get(suggest))
        .with_state(state)
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub host: String,
    pub port: u16,
    pub twin: PathBuf,
    pub guardian: Option<PathBuf>,
    pub policy: Option<PathBuf>,
    pub idle: Duration,
    pub generator: GeneratorConfig,
}

impl ServeOptions {
    pub fn load_models(&self) -> Result<Models> {
        if !self.twin.exists() {
            return Err(invalid(format!("twin checkpoint {} not found", self.twin.display())));
        }
        Ok(Models {
            twin: AnyTwin::load(&self.twin)?,
            guardian: self.guardian.as_deref().map(DensityModel::load).transpose()?,
            policy: self.policy.as_deref().map(PolicyModel::load).transpose()?,
            generator: SynthEnv::new(self.generator.clone()),
        })
    }
}

/// Loads the models and serves until the process is stopped.
pub fn serve_blocking(opts: ServeOptions) -> Result<()> {
    let state = AppState::new(opts.load_models()?, opts.idle);
    let addr: SocketAddr =
        format!("{}:{}", opts.host, opts.port).parse().map_err(|e| invalid(format!("bad listen address: {e}")))?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let sweeper = state.clone();
        let every = (opts.idle / 4).clamp(Duration::from_secs(1), Duration::from_secs(60));
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(every);
            loop {
                tick.tick().await;
                let n = sweeper.expire_idle();
                if n > 0 {
                    log::info!("expired {n} idle sessions");
                }
            }
        });
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("what-if service on http://{addr}");
        axum::serve(listener, router(state)).await?;
        Ok(())
    })
}
