//! JSON-over-HTTP and WebSocket service around a running [`System`].
//!
//! All routes live under `/v1`. Commands are serialized through one lock on
//! the system; stream clients read an ordered event log by sequence cursor,
//! so a reconnecting client resumes with no gaps or duplicates.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::watch;

use busguard_core::alarmdesk::{Alarm, AlarmError, AlarmState, FeedbackAction};
use busguard_core::bench::SCENARIO_FILES;
use busguard_core::recovery::{RecoveryError, SafeModeReason, SnapshotStore};
use busguard_core::simbot::{parse_kinds, InjectionKind, Scenario, SimError};
use busguard_core::system::{EventLog, MonitorConfig, StreamEvent, System, SystemError};

pub const CHANNELS: [&str; 5] = ["alarms", "risk", "frames", "graph", "status"];

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("cannot bind {addr}: {source}")]
    PortUnavailable { addr: SocketAddr, source: std::io::Error },
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("server: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub monitor: MonitorConfig,
    /// Where snapshots are persisted; in memory when unset.
    pub snapshot_dir: Option<PathBuf>,
    /// Simulated milliseconds per wall millisecond for the background driver.
    pub speed: f64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            monitor: MonitorConfig::default(),
            snapshot_dir: None,
            speed: 1.0,
        }
    }
}

struct Inner {
    sys: System,
    log: EventLog,
    forwarded: u64,
}

impl Inner {
    /// Copy new system events into the gateway log, which outlives any one
    /// system so sequence numbers never restart.
    fn sync(&mut self) -> u64 {
        for e in self.sys.stream().since(self.forwarded, &[]) {
            self.log.push(&e.channel, e.t_ms, e.data);
        }
        self.forwarded = self.sys.stream().last_seq();
        self.log.last_seq()
    }
}

pub struct Gateway {
    cfg: GatewayConfig,
    inner: Mutex<Inner>,
    seq: watch::Sender<u64>,
}

pub type Shared = Arc<Gateway>;

impl Gateway {
    pub fn new(cfg: GatewayConfig) -> Result<Shared, GatewayError> {
        let sys = build_system(&cfg)?;
        Ok(Self::with_system(cfg, sys))
    }

    pub fn with_system(cfg: GatewayConfig, sys: System) -> Shared {
        let mut inner = Inner {
            sys,
            log: EventLog::default(),
            forwarded: 0,
        };
        let seq = inner.sync();
        Arc::new(Self {
            cfg,
            inner: Mutex::new(inner),
            seq: watch::channel(seq).0,
        })
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Run `f` against the system, then publish any events it produced.
    pub fn with_system_mut<R>(&self, f: impl FnOnce(&mut System) -> R) -> R {
        let mut g = self.lock();
        let r = f(&mut g.sys);
        let seq = g.sync();
        drop(g);
        self.seq.send_replace(seq);
        r
    }

    pub fn read<R>(&self, f: impl FnOnce(&System) -> R) -> R {
        f(&self.lock().sys)
    }

    /// Advance the running scenario by one tick. `false` when nothing is running.
    pub fn step(&self) -> Result<bool, SystemError> {
        self.with_system_mut(|s| if s.is_running() { s.step() } else { Ok(false) })
    }

    pub fn events_since(&self, cursor: u64, channels: &[String]) -> Vec<StreamEvent> {
        self.lock().log.since(cursor, channels)
    }

    pub fn last_seq(&self) -> u64 {
        *self.seq.borrow()
    }

    fn start(&self, scenario: Scenario) -> Result<(), SystemError> {
        let mut fresh = build_system(&self.cfg).map_err(|e| match e {
            GatewayError::System(s) => s,
            other => SystemError::InvalidConfig(other.to_string()),
        })?;
        fresh.attach(scenario, None::<busguard_core::capture::MemorySink>)?;
        let mut g = self.lock();
        if g.sys.is_running() {
            return Err(SystemError::InvalidConfig("a scenario is already running".into()));
        }
        let _ = g.sys.finish();
        g.sync();
        g.sys = fresh;
        g.forwarded = 0;
        let seq = g.sync();
        drop(g);
        self.seq.send_replace(seq);
        Ok(())
    }
}

fn build_system(cfg: &GatewayConfig) -> Result<System, GatewayError> {
    let store = match &cfg.snapshot_dir {
        Some(d) => SnapshotStore::open(d).map_err(SystemError::from)?,
        None => SnapshotStore::in_memory(),
    };
    Ok(System::with_snapshot_store(cfg.monitor.clone(), store)?)
}

/// Step the system in the background at `cfg.speed` times real time.
pub fn spawn_driver(gw: Shared) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        loop {
            let tick_ms = gw.read(|s| s.simulator().map(|sim| sim.scenario().tick_ms)).unwrap_or(50).max(1);
            let period = Duration::from_secs_f64(tick_ms as f64 / gw.cfg.speed.max(1e-3) / 1000.0);
            tokio::time::sleep(period.max(Duration::from_micros(100))).await;
            if let Err(e) = gw.step() {
                tracing::error!(error = %e, "step failed; stopping the scenario");
                gw.with_system_mut(|s| {
                    let _ = s.stop_scenario();
                });
            }
        }
    })
}

/// Bind `addr`, start the driver and serve until the process ends.
pub async fn serve(gw: Shared, addr: SocketAddr) -> Result<(), GatewayError> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| GatewayError::PortUnavailable { addr, source })?;
    tracing::info!(addr = %listener.local_addr()?, "gateway listening");
    spawn_driver(gw.clone());
    axum::serve(listener, router(gw)).await?;
    Ok(())
}

pub fn router(gw: Shared) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/metrics", get(metrics))
        .route("/v1/graph", get(graph))
        .route("/v1/risk", get(risk))
        .route("/v1/alarms", get(alarms))
        .route("/v1/alarms/{id}/feedback", post(feedback))
        .route("/v1/frames", get(frames))
        .route("/v1/estop", post(estop))
        .route("/v1/safe_mode", post(safe_mode))
        .route("/v1/inject", post(inject))
        .route("/v1/snapshot/{node}", post(snapshot))
        .route("/v1/restore/{node}", post(restore))
        .route("/v1/scenario/{action}", post(scenario))
        .route("/v1/events", get(events))
        .route("/v1/stream", get(stream))
        .with_state(gw)
}

pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.message}))).into_response()
    }
}

impl From<SystemError> for ApiError {
    fn from(e: SystemError) -> Self {
        let status = match &e {
            SystemError::AlreadySafe | SystemError::NotSafe | SystemError::NoScenario => StatusCode::CONFLICT,
            SystemError::UnknownNode(_) => StatusCode::NOT_FOUND,
            SystemError::Alarm(AlarmError::UnknownAlarm(_)) => StatusCode::NOT_FOUND,
            SystemError::Alarm(_) => StatusCode::CONFLICT,
            SystemError::Recovery(RecoveryError::NoSnapshot(_)) => StatusCode::NOT_FOUND,
            SystemError::Recovery(RecoveryError::NodeUnhealthy { .. } | RecoveryError::CycleGuardTripped { .. }) => StatusCode::CONFLICT,
            SystemError::Sim(SimError::ScenarioNotRunning) => StatusCode::CONFLICT,
            SystemError::Sim(_) | SystemError::InvalidConfig(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

fn to_json<T: Serialize>(v: T) -> ApiResult {
    serde_json::to_value(v)
        .map(Json)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

fn alarm_json(sys: &System, a: &Alarm) -> Value {
    let mut v = serde_json::to_value(a).unwrap_or(Value::Null);
    v["signature_suppressed"] = json!(sys.desk().is_suppressed(&a.signature, sys.now_ms()));
    v
}

async fn health(State(gw): State<Shared>) -> ApiResult {
    Ok(Json(gw.read(|s| s.health())))
}

async fn metrics(State(gw): State<Shared>) -> ApiResult {
    Ok(Json(gw.read(|s| s.metrics())))
}

async fn graph(State(gw): State<Shared>) -> ApiResult {
    gw.read(|s| to_json(s.graph()))
}

async fn risk(State(gw): State<Shared>) -> ApiResult {
    gw.read(|s| match s.risk() {
        Some(r) => to_json(r),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, "no envelope configured")),
    })
}

#[derive(Deserialize)]
struct AlarmQuery {
    state: Option<String>,
}

async fn alarms(State(gw): State<Shared>, Query(q): Query<AlarmQuery>) -> ApiResult {
    let state = match q.state.as_deref() {
        None | Some("") | Some("all") => None,
        Some(s) => Some(
            serde_json::from_value::<AlarmState>(json!(s))
                .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, format!("unknown alarm state {s}")))?,
        ),
    };
    Ok(Json(gw.read(|s| {
        let list: Vec<Value> = s.alarms(state).into_iter().map(|a| alarm_json(s, a)).collect();
        json!({"t_ms": s.now_ms(), "alarms": list})
    })))
}

#[derive(Deserialize)]
struct FeedbackBody {
    action: FeedbackAction,
}

async fn feedback(State(gw): State<Shared>, Path(id): Path<u64>, Json(body): Json<FeedbackBody>) -> ApiResult {
    gw.with_system_mut(|s| {
        let alarm = s.feedback(id, body.action)?;
        let model = s.desk().model(&alarm.signature).cloned();
        Ok(Json(json!({"alarm": alarm_json(s, &alarm), "model": model})))
    })
}

#[derive(Deserialize)]
struct FrameQuery {
    topic: Option<String>,
    limit: Option<usize>,
}

async fn frames(State(gw): State<Shared>, Query(q): Query<FrameQuery>) -> ApiResult {
    gw.read(|s| {
        let all = s.frames(q.topic.as_deref());
        let skip = all.len().saturating_sub(q.limit.unwrap_or(usize::MAX));
        to_json(json!({"frames": &all[skip..]}))
    })
}

async fn estop(State(gw): State<Shared>) -> ApiResult {
    gw.with_system_mut(|s| to_json(s.estop()?))
}

#[derive(Deserialize)]
struct SafeModeBody {
    action: String,
}

async fn safe_mode(State(gw): State<Shared>, Json(body): Json<SafeModeBody>) -> ApiResult {
    gw.with_system_mut(|s| match body.action.as_str() {
        "enter" => to_json(s.enter_safe_mode(SafeModeReason::Operator)?),
        "exit" => to_json(s.exit_safe_mode()?),
        other => Err(ApiError::new(StatusCode::BAD_REQUEST, format!("action must be enter or exit, got {other}"))),
    })
}

#[derive(Deserialize)]
struct InjectBody {
    kind: String,
    magnitude: Option<f64>,
    duration_ms: Option<i64>,
}

async fn inject(State(gw): State<Shared>, Json(body): Json<InjectBody>) -> ApiResult {
    let kind = InjectionKind::parse(&body.kind)
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, format!("unknown injection kind {}", body.kind)))?;
    gw.with_system_mut(|s| {
        let index = s.inject(kind, body.magnitude, body.duration_ms)?;
        Ok(Json(json!({"kind": kind, "index": index, "start_ms": s.now_ms()})))
    })
}

async fn snapshot(State(gw): State<Shared>, Path(node): Path<String>) -> ApiResult {
    gw.with_system_mut(|s| to_json(s.snapshot_now(&node)?))
}

async fn restore(State(gw): State<Shared>, Path(node): Path<String>) -> ApiResult {
    gw.with_system_mut(|s| to_json(s.restore(&node)?))
}

#[derive(Deserialize, Default)]
struct StartBody {
    /// One of the shipped benchmark paths.
    name: Option<String>,
    /// A full scenario; wins over `name`.
    scenario: Option<Scenario>,
    /// Replace the scenario's injections with one per listed kind.
    inject: Option<String>,
    seed: Option<u64>,
    duration_ms: Option<i64>,
}

fn resolve_scenario(body: StartBody) -> Result<Scenario, ApiError> {
    let bad = |m: String| ApiError::new(StatusCode::BAD_REQUEST, m);
    let mut sc = match (body.scenario, body.name.as_deref()) {
        (Some(sc), _) => sc,
        (None, name) => {
            let name = name.unwrap_or(SCENARIO_FILES[0].0);
            let (_, text) = SCENARIO_FILES
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| bad(format!("unknown scenario {name}")))?;
            Scenario::from_yaml(text).map_err(|e| bad(e.to_string()))?
        }
    };
    if let Some(d) = body.duration_ms {
        sc.duration_ms = d;
        sc.injections.retain(|i| i.end_ms <= d);
    }
    if let Some(seed) = body.seed {
        sc.seed = seed;
    }
    if let Some(list) = body.inject {
        let kinds = parse_kinds(&list).map_err(|e| bad(e.to_string()))?;
        let seed = sc.seed;
        sc = sc.with_planned_injections(&kinds, seed);
    }
    sc.validate().map_err(|e| bad(e.to_string()))?;
    Ok(sc)
}

async fn scenario(State(gw): State<Shared>, Path(action): Path<String>, body: Option<Json<StartBody>>) -> ApiResult {
    match action.as_str() {
        "start" => {
            if gw.read(|s| s.is_running()) {
                return Err(ApiError::new(StatusCode::CONFLICT, "a scenario is already running"));
            }
            let sc = resolve_scenario(body.map(|b| b.0).unwrap_or_default())?;
            let name = sc.name.clone();
            gw.start(sc).map_err(|e| match e {
                SystemError::InvalidConfig(m) if m.contains("already running") => ApiError::new(StatusCode::CONFLICT, m),
                e => e.into(),
            })?;
            Ok(Json(json!({"scenario": name, "status": "running"})))
        }
        "stop" => gw.with_system_mut(|s| {
            s.stop_scenario()?;
            Ok(Json(json!({"status": "stopped", "t_ms": s.now_ms()})))
        }),
        other => Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown scenario action {other}"))),
    }
}

#[derive(Deserialize)]
struct EventQuery {
    #[serde(default)]
    cursor: u64,
    /// Comma-separated channel names; all when absent.
    channels: Option<String>,
}

fn parse_channels(list: &[String]) -> Result<Vec<String>, ApiError> {
    for c in list {
        if !CHANNELS.contains(&c.as_str()) {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("unknown channel {c}")));
        }
    }
    Ok(list.to_vec())
}

/// Polling read of the stream, for clients that cannot hold a socket.
async fn events(State(gw): State<Shared>, Query(q): Query<EventQuery>) -> ApiResult {
    let channels: Vec<String> = q
        .channels
        .as_deref()
        .map(|s| s.split(',').filter(|c| !c.is_empty()).map(str::to_string).collect())
        .unwrap_or_default();
    let channels = parse_channels(&channels)?;
    let events = gw.events_since(q.cursor, &channels);
    let cursor = events.last().map_or(q.cursor, |e| e.seq);
    to_json(json!({"cursor": cursor, "events": events}))
}

/// Client-to-server stream control message.
#[derive(Debug, Deserialize)]
pub struct Subscribe {
    pub subscribe: Vec<String>,
    /// Resume after this sequence number; only new events when absent.
    pub cursor: Option<u64>,
}

async fn stream(State(gw): State<Shared>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| stream_session(gw, socket))
}

async fn stream_session(gw: Shared, mut socket: WebSocket) {
    let mut seq_rx = gw.seq.subscribe();
    let mut channels: Option<Vec<String>> = None;
    let mut cursor = gw.last_seq();
    loop {
        if let Some(ch) = &channels {
            for e in gw.events_since(cursor, ch) {
                cursor = e.seq;
                let Ok(text) = serde_json::to_string(&e) else { continue };
                if socket.send(WsMessage::Text(text.into())).await.is_err() {
                    return;
                }
            }
        }
        tokio::select! {
            changed = seq_rx.changed() => {
                if changed.is_err() {
                    return;
                }
            }
            msg = socket.recv() => {
                let text = match msg {
                    Some(Ok(WsMessage::Text(t))) => t,
                    Some(Ok(WsMessage::Close(_))) | None | Some(Err(_)) => return,
                    Some(Ok(_)) => continue,
                };
                let reply = match serde_json::from_str::<Subscribe>(&text) {
                    Ok(sub) => match parse_channels(&sub.subscribe) {
                        Ok(ch) => {
                            if let Some(c) = sub.cursor {
                                cursor = c;
                            }
                            let ack = json!({"subscribed": ch, "cursor": cursor});
                            channels = Some(ch);
                            ack
                        }
                        Err(e) => json!({"error": e.message}),
                    },
                    Err(e) => json!({"error": format!("expected {{\"subscribe\": [...]}}: {e}")}),
                };
                if socket.send(WsMessage::Text(reply.to_string().into())).await.is_err() {
                    return;
                }
            }
        }
    }
}
