//! Interactive session server: lock-step steering of the simulator and the
//! learned world model over HTTP and WebSocket.
//!
//! * `POST /session` with a [`SessionConfig`] returns `{id, frames}`.
//! * `DELETE /session/{id}` ends a session.
//! * `GET /health` reports liveness.
//! * `GET /session/{id}/stream` upgrades to a WebSocket. Each
//!   `{"type":"action","action":k}` yields one frame message per stream
//!   (`sim`, `wm`, or both in side-by-side mode).

use std::collections::{HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use base64::Engine as _;
use futures::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::mpsc;

use crate::bench::percentile;
use crate::eval::{start_from, EvalError};
use crate::frame::BevFrame;
use crate::mask::{MaskMode, MaskParams};
use crate::nn::{Denoiser, NnError};
use crate::sample::{denoise_next_frame, FrameDenoiser, RolloutState, SampleError, SamplerConfig};
use crate::sim::{self, Action, SimConfig, SimError, SimWorld};

const LATENCY_WINDOW: usize = 120;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid session config: {0}")]
    Config(String),
    #[error("cannot load model {path}: {source}")]
    Model { path: PathBuf, source: NnError },
    #[error("no session {0}")]
    NotFound(String),
    #[error("invalid action code {0}")]
    BadAction(i64),
    #[error("session is busy with the previous action")]
    Busy,
    #[error("simulator session ended in a collision at step {0}")]
    Terminal(u64),
    #[error("bad message: {0}")]
    BadMessage(String),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Sim(SimError),
    #[error("frame encoding failed: {0}")]
    Encode(String),
}

impl From<SimError> for ServiceError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Terminal { step } => ServiceError::Terminal(step),
            e => ServiceError::Sim(e),
        }
    }
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Config(_) => "invalid_config",
            ServiceError::Model { .. } => "model_load",
            ServiceError::NotFound(_) => "not_found",
            ServiceError::BadAction(_) => "bad_action",
            ServiceError::Busy => "busy",
            ServiceError::Terminal(_) => "terminal",
            ServiceError::BadMessage(_) => "bad_message",
            ServiceError::Sample(_) | ServiceError::Sim(_) | ServiceError::Encode(_) => "internal",
        }
    }

    fn status(&self) -> StatusCode {
        match self {
            ServiceError::Config(_) | ServiceError::BadAction(_) | ServiceError::BadMessage(_) => StatusCode::BAD_REQUEST,
            ServiceError::Model { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Busy => StatusCode::CONFLICT,
            ServiceError::Terminal(_) => StatusCode::GONE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = Json(serde_json::json!({"code": self.code(), "msg": self.to_string()}));
        (self.status(), body).into_response()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionMode {
    #[default]
    Sim,
    Wm,
    SideBySide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SessionConfig {
    pub mode: SessionMode,
    /// Falls back to the server's model when absent.
    pub model: Option<PathBuf>,
    /// Defaults to soft when the model takes a mask channel, else none.
    pub mask_mode: Option<MaskMode>,
    pub warm_start: bool,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Sim,
    Wm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub p95_latency_ms: f64,
    pub p95_fps: f64,
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub step: u64,
    pub frames: Vec<(StreamKind, BevFrame)>,
    pub latency_ms: f64,
    pub metrics: MetricsSnapshot,
}

struct WmState {
    model: Arc<Denoiser>,
    mask: MaskParams,
    sampler: SamplerConfig,
    rollout: RolloutState,
}

/// One steering session; everything it touches is owned.
pub struct Session {
    pub config: SessionConfig,
    sim: Option<SimWorld>,
    wm: Option<WmState>,
    step: u64,
    latencies: VecDeque<f64>,
}

impl Session {
    /// `model` must be present for `wm` and side-by-side modes.
    pub fn new(config: SessionConfig, sim_cfg: &SimConfig, model: Option<Arc<Denoiser>>) -> Result<Self, ServiceError> {
        config.sampler.validate()?;
        let world = sim::spawn(sim_cfg, config.seed)?;
        if config.mode == SessionMode::Sim {
            return Ok(Self {
                config,
                sim: Some(world),
                wm: None,
                step: 0,
                latencies: VecDeque::new(),
            });
        }
        let model = model.ok_or_else(|| ServiceError::Config(format!("mode {:?} needs a model", config.mode)))?;
        let mask_mode = config.mask_mode.unwrap_or(if model.mask_channels() > 0 {
            MaskMode::Soft
        } else {
            MaskMode::None
        });
        if mask_mode.channels() != model.mask_channels() {
            return Err(ServiceError::Config(format!(
                "mask mode {} does not match a model with {} mask channel(s)",
                mask_mode.as_str(),
                model.mask_channels()
            )));
        }
        let start = start_from(world, model.history_len(), config.seed).map_err(ServiceError::from)?;
        let rollout = RolloutState::new(start.context, &start.prior_actions, config.seed)?;
        let sampler = SamplerConfig {
            warm_start: config.warm_start,
            ..config.sampler.clone()
        };
        Ok(Self {
            sim: (config.mode == SessionMode::SideBySide).then_some(start.world),
            wm: Some(WmState {
                model,
                mask: MaskParams::with_mode(mask_mode),
                sampler,
                rollout,
            }),
            config,
            step: 0,
            latencies: VecDeque::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// The frames currently on screen.
    pub fn current_frames(&self) -> Vec<(StreamKind, BevFrame)> {
        let mut out = Vec::new();
        if let Some(w) = &self.sim {
            out.push((StreamKind::Sim, sim::render_bev(w)));
        }
        if let Some(wm) = &self.wm {
            out.push((StreamKind::Wm, wm.rollout.newest().clone()));
        }
        out
    }

    /// Advances every stream by exactly one frame.
    pub fn step(&mut self, action: Action) -> Result<StepResult, ServiceError> {
        let mut frames = Vec::with_capacity(2);
        let mut latency = 0.0;
        if let Some(w) = &self.sim {
            let t0 = Instant::now();
            let next = sim::step(w, action)?;
            let f = sim::render_bev(&next);
            latency += t0.elapsed().as_secs_f64() * 1e3;
            self.sim = Some(next);
            frames.push((StreamKind::Sim, f));
        }
        if let Some(wm) = &mut self.wm {
            let t0 = Instant::now();
            let f = denoise_next_frame(&mut wm.rollout, action, wm.model.as_ref(), &wm.mask, &wm.sampler)?;
            // In side-by-side mode the reported latency is the model's.
            latency = t0.elapsed().as_secs_f64() * 1e3;
            frames.push((StreamKind::Wm, f));
        }
        self.step += 1;
        if self.latencies.len() == LATENCY_WINDOW {
            self.latencies.pop_front();
        }
        self.latencies.push_back(latency);
        Ok(StepResult {
            step: self.step,
            frames,
            latency_ms: latency,
            metrics: self.metrics(),
        })
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        let v: Vec<f64> = self.latencies.iter().copied().collect();
        let p95 = percentile(&v, 95.0).unwrap_or(0.0);
        MetricsSnapshot {
            p95_latency_ms: p95,
            p95_fps: if p95 > 0.0 { 1000.0 / p95 } else { 0.0 },
            window: v.len(),
        }
    }
}

/// Session plus the queue-depth-1 guard.
pub struct SessionSlot {
    busy: AtomicBool,
    session: Mutex<Session>,
}

impl SessionSlot {
    pub fn new(session: Session) -> Self {
        Self {
            busy: AtomicBool::new(false),
            session: Mutex::new(session),
        }
    }

    /// Runs one action unless another is in flight.
    pub fn try_step(&self, action: Action) -> Result<StepResult, ServiceError> {
        if self.busy.swap(true, Ordering::AcqRel) {
            return Err(ServiceError::Busy);
        }
        let r = self.session.lock().expect("session lock poisoned").step(action);
        self.busy.store(false, Ordering::Release);
        r
    }

    /// Marks the slot busy; the returned guard clears it on drop.
    pub fn reserve(self: &Arc<Self>) -> Result<Reservation, ServiceError> {
        if self.busy.swap(true, Ordering::AcqRel) {
            return Err(ServiceError::Busy);
        }
        Ok(Reservation(self.clone()))
    }
}

pub struct Reservation(Arc<SessionSlot>);

impl Reservation {
    pub fn step(&self, action: Action) -> Result<StepResult, ServiceError> {
        self.0.session.lock().expect("session lock poisoned").step(action)
    }
}

impl Drop for Reservation {
    fn drop(&mut self) {
        self.0.busy.store(false, Ordering::Release);
    }
}

/// Shared server state. Models are loaded once per path and shared read-only.
pub struct AppState {
    pub sim_config: SimConfig,
    pub default_model: Option<PathBuf>,
    models: Mutex<HashMap<PathBuf, Arc<Denoiser>>>,
    sessions: Mutex<HashMap<String, Arc<SessionSlot>>>,
}

impl AppState {
    pub fn new(sim_config: SimConfig, default_model: Option<PathBuf>) -> Self {
        Self {
            sim_config,
            default_model,
            models: Mutex::new(HashMap::new()),
            sessions: Mutex::new(HashMap::new()),
        }
    }

    fn model(&self, path: &Path) -> Result<Arc<Denoiser>, ServiceError> {
        let mut cache = self.models.lock().expect("model cache poisoned");
        if let Some(m) = cache.get(path) {
            return Ok(m.clone());
        }
        let m = Arc::new(Denoiser::load(path).map_err(|source| ServiceError::Model {
            path: path.to_path_buf(),
            source,
        })?);
        cache.insert(path.to_path_buf(), m.clone());
        Ok(m)
    }

    pub fn create_session(&self, config: SessionConfig) -> Result<(String, Vec<(StreamKind, BevFrame)>), ServiceError> {
        let model = match (config.mode, config.model.as_ref().or(self.default_model.as_ref())) {
            (SessionMode::Sim, _) => None,
            (_, Some(p)) => Some(self.model(p)?),
            (mode, None) => return Err(ServiceError::Config(format!("mode {mode:?} needs a model path"))),
        };
        let session = Session::new(config, &self.sim_config, model)?;
        let frames = session.current_frames();
        let mut sessions = self.sessions.lock().expect("session map poisoned");
        let id = loop {
            let id = format!("{:016x}", rand::random::<u64>());
            if !sessions.contains_key(&id) {
                break id;
            }
        };
        sessions.insert(id.clone(), Arc::new(SessionSlot::new(session)));
        Ok((id, frames))
    }

    pub fn get(&self, id: &str) -> Result<Arc<SessionSlot>, ServiceError> {
        self.sessions
            .lock()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(id.to_string()))
    }

    pub fn remove(&self, id: &str) -> Result<(), ServiceError> {
        self.sessions
            .lock()
            .expect("session map poisoned")
            .remove(id)
            .map(|_| ())
            .ok_or_else(|| ServiceError::NotFound(id.to_string()))
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session map poisoned").len()
    }
}

pub fn png_b64(frame: &BevFrame) -> Result<String, ServiceError> {
    let png = frame.to_png().map_err(|e| ServiceError::Encode(e.to_string()))?;
    Ok(base64::engine::general_purpose::STANDARD.encode(png))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Action { action: i64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Frame {
        step: u64,
        mode: StreamKind,
        png_b64: String,
        latency_ms: f64,
        metrics: MetricsSnapshot,
    },
    Error {
        code: String,
        msg: String,
    },
}

impl From<&ServiceError> for ServerMessage {
    fn from(e: &ServiceError) -> Self {
        ServerMessage::Error {
            code: e.code().into(),
            msg: e.to_string(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FramePayload {
    pub mode: StreamKind,
    pub png_b64: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreatedSession {
    pub id: String,
    pub frames: Vec<FramePayload>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/session", post(create))
        .route("/session/{id}", delete(remove))
        .route("/session/{id}/stream", get(stream))
        .with_state(state)
}

async fn health(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "status": "ok",
        "sessions": st.session_count(),
        "model": st.default_model,
    }))
}

async fn create(State(st): State<Arc<AppState>>, Json(cfg): Json<SessionConfig>) -> Result<(StatusCode, Json<CreatedSession>), ServiceError> {
    let st2 = st.clone();
    let (id, frames) = tokio::task::spawn_blocking(move || st2.create_session(cfg))
        .await
        .map_err(|e| ServiceError::Config(e.to_string()))??;
    let frames = frames
        .iter()
        .map(|(mode, f)| Ok(FramePayload { mode: *mode, png_b64: png_b64(f)? }))
        .collect::<Result<_, ServiceError>>()?;
    Ok((StatusCode::CREATED, Json(CreatedSession { id, frames })))
}

async fn remove(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<StatusCode, ServiceError> {
    st.remove(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn stream(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    ws: WebSocketUpgrade,
) -> Result<Response, ServiceError> {
    let slot = st.get(&id)?;
    Ok(ws.on_upgrade(move |socket| serve_socket(socket, slot)))
}

fn encode_step(r: StepResult) -> Vec<ServerMessage> {
    r.frames
        .iter()
        .map(|(mode, f)| match png_b64(f) {
            Ok(png_b64) => ServerMessage::Frame {
                step: r.step,
                mode: *mode,
                png_b64,
                latency_ms: r.latency_ms,
                metrics: r.metrics.clone(),
            },
            Err(e) => (&e).into(),
        })
        .collect()
}

fn parse_action(text: &str) -> Result<Action, ServiceError> {
    let ClientMessage::Action { action } = serde_json::from_str(text).map_err(|e| ServiceError::BadMessage(e.to_string()))?;
    u8::try_from(action)
        .ok()
        .and_then(|c| Action::from_code(c).ok())
        .ok_or(ServiceError::BadAction(action))
}

async fn serve_socket(socket: WebSocket, slot: Arc<SessionSlot>) {
    let (mut sink, mut incoming) = socket.split();
    let (tx, mut rx) = mpsc::unbounded_channel::<ServerMessage>();
    let writer = tokio::spawn(async move {
        while let Some(msg) = rx.recv().await {
            let text = serde_json::to_string(&msg).expect("server messages serialize");
            if sink.send(Message::Text(text.into())).await.is_err() {
                break;
            }
        }
    });
    while let Some(Ok(msg)) = incoming.next().await {
        let text = match msg {
            Message::Text(t) => t.to_string(),
            Message::Close(_) => break,
            _ => continue,
        };
        let action = match parse_action(&text) {
            Ok(a) => a,
            Err(e) => {
                let _ = tx.send((&e).into());
                continue;
            }
        };
        let reservation = match slot.reserve() {
            Ok(r) => r,
            Err(e) => {
                let _ = tx.send((&e).into());
                continue;
            }
        };
        let tx = tx.clone();
        tokio::task::spawn_blocking(move || {
            let msgs = match reservation.step(action) {
                Ok(r) => encode_step(r),
                Err(e) => vec![(&e).into()],
            };
            // Release before the frames go out so the client's next action is accepted.
            drop(reservation);
            for m in msgs {
                let _ = tx.send(m);
            }
        });
    }
    drop(tx);
    let _ = writer.await;
}

/// Binds and serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

impl From<EvalError> for ServiceError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Sim(s) => s.into(),
            EvalError::Sample(s) => s.into(),
            e => ServiceError::Config(e.to_string()),
        }
    }
}
