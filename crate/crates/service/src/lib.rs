//! HTTP front end for live sessions.
//!
//! Each session owns one worker thread running a [`SessionMachine`] over an
//! ordered input queue. Events are appended to `logs/<id>.jsonl` and fanned out
//! to server-sent-event subscribers through a bounded broadcast channel; a
//! subscriber that falls behind gets a `notice` event and is disconnected.

pub mod llm;

use std::collections::{HashMap, VecDeque};
use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use gazebot::inference::{LlmClient, MockLlm};
use gazebot::perception::GazeSample;
use gazebot::planner::WorldFixture;
use gazebot::session::{
    append_log, log_path, EventBody, IntentModel, SessionConfig, SessionEvent, SessionInput, SessionMachine,
    SessionSnapshot,
};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tokio::sync::broadcast;

pub use llm::HttpLlm;

/// Default buffered events per subscriber before it counts as lagging.
pub const BROADCAST_CAPACITY: usize = 1024;
/// Queued inputs per session before gaze posts are refused.
pub const INPUT_CAPACITY: usize = 8192;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("serve: {0}")]
    Serve(std::io::Error),
}

#[derive(Clone)]
pub struct ServiceConfig {
    pub model: Arc<IntentModel>,
    pub llm: Arc<dyn LlmClient>,
    pub fixture: WorldFixture,
    pub session: SessionConfig,
    pub log_dir: PathBuf,
    pub broadcast_capacity: usize,
}

impl ServiceConfig {
    pub fn new(model: Arc<IntentModel>, llm: Arc<dyn LlmClient>, fixture: WorldFixture, log_dir: PathBuf) -> Self {
        Self {
            model,
            llm,
            fixture,
            session: SessionConfig::default(),
            log_dir,
            broadcast_capacity: BROADCAST_CAPACITY,
        }
    }
}

struct LogState {
    events: Vec<SessionEvent>,
    snapshot: SessionSnapshot,
}

struct Shared {
    log: Mutex<LogState>,
    tx: broadcast::Sender<SessionEvent>,
}

struct SessionHandle {
    input: SyncSender<SessionInput>,
    shared: Arc<Shared>,
}

#[derive(Clone)]
pub struct AppState {
    cfg: Arc<ServiceConfig>,
    sessions: Arc<RwLock<HashMap<String, SessionHandle>>>,
    counter: Arc<AtomicU64>,
}

impl AppState {
    pub fn new(cfg: ServiceConfig) -> Self {
        Self {
            cfg: Arc::new(cfg),
            sessions: Arc::new(RwLock::new(HashMap::new())),
            counter: Arc::new(AtomicU64::new(1)),
        }
    }

    fn handle(&self, id: &str) -> Option<(SyncSender<SessionInput>, Arc<Shared>)> {
        let map = self.sessions.read().expect("session map lock");
        map.get(id).map(|h| (h.input.clone(), h.shared.clone()))
    }
}

/// Session creation body. `mode` is `"live"` (the server's language model) or
/// `"mock"` (force the offline rule table); `fixture` replaces the server's
/// default scene.
#[derive(Debug, Default, Deserialize)]
pub struct CreateSession {
    #[serde(default)]
    pub fixture: Option<WorldFixture>,
    #[serde(default)]
    pub mode: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
    pub phase: gazebot::session::SessionPhase,
    pub objects: Vec<String>,
}

/// Gaze posted by a client. Missing coordinates or `on_screen: false` mean the
/// sample is off-screen.
#[derive(Debug, Deserialize)]
pub struct GazePost {
    pub t_us: i64,
    #[serde(default)]
    pub gx: Option<f64>,
    #[serde(default)]
    pub gy: Option<f64>,
    #[serde(default)]
    pub on_screen: Option<bool>,
}

impl GazePost {
    fn to_sample(&self) -> Result<GazeSample, String> {
        match (self.gx, self.gy, self.on_screen.unwrap_or(true)) {
            (Some(x), Some(y), true) if x.is_finite() && y.is_finite() => Ok(GazeSample::new(self.t_us, x, y)),
            (Some(_), Some(_), true) => Err("gaze coordinates must be finite".into()),
            _ => Ok(GazeSample::off_screen(self.t_us)),
        }
    }
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/events", get(stream_events))
        .route("/sessions/{id}/gaze", post(post_gaze))
        .route("/sessions/{id}/abort", post(abort_session))
        .with_state(state)
}

fn publish(shared: &Shared, m: &SessionMachine, new: Vec<SessionEvent>, log_file: &std::path::Path) {
    let mut log = shared.log.lock().expect("log lock");
    if !new.is_empty() {
        if let Err(e) = append_log(log_file, &new) {
            tracing::warn!(error = %e, path = %log_file.display(), "event log append failed");
        }
    }
    log.snapshot = m.snapshot();
    for ev in new {
        log.events.push(ev.clone());
        let _ = shared.tx.send(ev);
    }
}

fn run_worker(mut m: SessionMachine, shared: Arc<Shared>, rx: Receiver<SessionInput>, log_file: PathBuf) {
    while let Ok(input) = rx.recv() {
        let new = m.push(input);
        publish(&shared, &m, new, &log_file);
        if m.phase().is_terminal() {
            break;
        }
    }
    if !m.phase().is_terminal() {
        let new = m.push(SessionInput::End);
        publish(&shared, &m, new, &log_file);
    }
}

async fn create_session(State(st): State<AppState>, body: Option<Json<CreateSession>>) -> Response {
    let req = body.map(|Json(b)| b).unwrap_or_default();
    let llm: Arc<dyn LlmClient> = match req.mode.as_deref() {
        None | Some("live") => st.cfg.llm.clone(),
        Some("mock") => Arc::new(MockLlm::default()),
        Some(other) => return error(StatusCode::BAD_REQUEST, format!("unknown mode {other:?}")),
    };
    let fixture = req.fixture.unwrap_or_else(|| st.cfg.fixture.clone());
    let world = match fixture.into_world() {
        Ok(w) => w,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    // Logs are append-only, so never reuse an id that already has one on disk.
    let (id, log_file) = loop {
        let id = format!("s{:06}", st.counter.fetch_add(1, Ordering::Relaxed));
        let path = log_path(&st.cfg.log_dir, &id);
        if !path.exists() {
            break (id, path);
        }
    };
    let m = SessionMachine::new(id.clone(), st.cfg.session.clone(), st.cfg.model.clone(), llm, world);
    let initial = m.events().to_vec();
    if let Err(e) = append_log(&log_file, &initial) {
        return error(StatusCode::INTERNAL_SERVER_ERROR, format!("event log: {e}"));
    }
    let snapshot = m.snapshot();
    let (tx, _) = broadcast::channel(st.cfg.broadcast_capacity.max(1));
    let shared = Arc::new(Shared {
        log: Mutex::new(LogState {
            events: initial,
            snapshot: snapshot.clone(),
        }),
        tx,
    });
    let (input, rx) = sync_channel(INPUT_CAPACITY);
    let worker_shared = shared.clone();
    let spawned = std::thread::Builder::new()
        .name(format!("session-{id}"))
        .spawn(move || run_worker(m, worker_shared, rx, log_file));
    if let Err(e) = spawned {
        return error(StatusCode::INTERNAL_SERVER_ERROR, format!("worker: {e}"));
    }
    st.sessions
        .write()
        .expect("session map lock")
        .insert(id.clone(), SessionHandle { input, shared });
    let created = Created {
        id,
        phase: snapshot.phase,
        objects: snapshot.world.labels(),
    };
    (StatusCode::CREATED, Json(created)).into_response()
}

async fn get_session(State(st): State<AppState>, Path(id): Path<String>) -> Response {
    match st.handle(&id) {
        Some((_, shared)) => Json(shared.log.lock().expect("log lock").snapshot.clone()).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("no session {id}")),
    }
}

fn enqueue(st: &AppState, id: &str, input: SessionInput) -> Response {
    let Some((tx, shared)) = st.handle(id) else {
        return error(StatusCode::NOT_FOUND, format!("no session {id}"));
    };
    let phase = shared.log.lock().expect("log lock").snapshot.phase;
    if phase.is_terminal() {
        return error(StatusCode::CONFLICT, format!("session {id} is {phase:?}"));
    }
    match tx.try_send(input) {
        Ok(()) => StatusCode::ACCEPTED.into_response(),
        Err(TrySendError::Full(_)) => error(StatusCode::SERVICE_UNAVAILABLE, "input queue full"),
        Err(TrySendError::Disconnected(_)) => error(StatusCode::CONFLICT, format!("session {id} has ended")),
    }
}

async fn post_gaze(State(st): State<AppState>, Path(id): Path<String>, Json(g): Json<GazePost>) -> Response {
    match g.to_sample() {
        Ok(s) => enqueue(&st, &id, SessionInput::Gaze(s)),
        Err(e) => error(StatusCode::BAD_REQUEST, e),
    }
}

async fn abort_session(State(st): State<AppState>, Path(id): Path<String>) -> Response {
    enqueue(&st, &id, SessionInput::Abort("user_abort".into()))
}

fn is_final(ev: &SessionEvent) -> bool {
    matches!(&ev.body, EventBody::Phase { to, .. } if to.is_terminal())
}

fn to_sse(ev: &SessionEvent) -> Event {
    Event::default()
        .id(ev.seq.to_string())
        .data(serde_json::to_string(ev).expect("events serialize"))
}

struct Subscription {
    backlog: VecDeque<SessionEvent>,
    rx: broadcast::Receiver<SessionEvent>,
    next_seq: u64,
    done: bool,
}

/// Backlog then live events, in seq order and without gaps. Ends after the
/// terminal phase event.
fn subscribe(shared: &Shared) -> impl Stream<Item = Result<Event, Infallible>> {
    let sub = {
        let log = shared.log.lock().expect("log lock");
        Subscription {
            backlog: log.events.iter().cloned().collect(),
            rx: shared.tx.subscribe(),
            next_seq: log.events.len() as u64,
            done: false,
        }
    };
    futures::stream::unfold(sub, |mut sub| async move {
        if sub.done {
            return None;
        }
        if let Some(ev) = sub.backlog.pop_front() {
            sub.done = is_final(&ev);
            return Some((Ok(to_sse(&ev)), sub));
        }
        loop {
            match sub.rx.recv().await {
                Ok(ev) if ev.seq < sub.next_seq => continue,
                Ok(ev) => {
                    sub.next_seq = ev.seq + 1;
                    sub.done = is_final(&ev);
                    return Some((Ok(to_sse(&ev)), sub));
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    sub.done = true;
                    let notice = Event::default().event("notice").data(
                        json!({ "kind": "notice", "reason": "subscriber_lagged", "dropped": n, "resume_after": sub.next_seq })
                            .to_string(),
                    );
                    return Some((Ok(notice), sub));
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    })
}

async fn stream_events(State(st): State<AppState>, Path(id): Path<String>) -> Response {
    match st.handle(&id) {
        Some((_, shared)) => Sse::new(subscribe(&shared)).keep_alive(KeepAlive::default()).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("no session {id}")),
    }
}

/// Bind and serve until the process is stopped.
pub async fn serve(bind: &str, cfg: ServiceConfig) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(bind).await.map_err(|source| ServiceError::Bind {
        addr: bind.to_string(),
        source,
    })?;
    let addr: Option<SocketAddr> = listener.local_addr().ok();
    tracing::info!(?addr, "listening");
    axum::serve(listener, router(AppState::new(cfg)))
        .await
        .map_err(ServiceError::Serve)
}
