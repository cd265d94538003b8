use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use gazebot::eval::{pour_water_session, scripted_gaze};
use gazebot::inference::{ChatMessage, ClientKind, LlmClient, LlmError, MockLlm};
use gazebot::perception::{GazeSample, SceneGeometry};
use gazebot::planner::WorldFixture;
use gazebot::session::{
    audit_safety, read_log, replay, EventBody, IntentModel, SessionConfig, SessionEvent, SessionInput, SessionMachine,
    SessionPhase, SessionSnapshot,
};
use gazebot_service::{router, AppState, Created, HttpLlm, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn model() -> Arc<IntentModel> {
    Arc::new(IntentModel::mean_ratio_rule(2.0))
}

fn fixture() -> WorldFixture {
    pour_water_session().fixture
}

fn app(dir: &Path, capacity: Option<usize>) -> Router {
    let mut cfg = ServiceConfig::new(model(), Arc::new(MockLlm::default()), fixture(), dir.to_path_buf());
    if let Some(c) = capacity {
        cfg.broadcast_capacity = c;
    }
    router(AppState::new(cfg))
}

fn pour_gaze() -> Vec<GazeSample> {
    let s = pour_water_session();
    let world = s.fixture.clone().into_world().unwrap();
    scripted_gaze(&s, &world, &SceneGeometry::default()).unwrap()
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn create(app: &Router, body: Value) -> String {
    let (status, bytes) = call(app, "POST", "/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&bytes));
    serde_json::from_slice::<Created>(&bytes).unwrap().id
}

async fn post_gaze(app: &Router, id: &str, g: &GazeSample) -> StatusCode {
    let body = json!({"gx": g.gx, "gy": g.gy, "t_us": g.t_us});
    call(app, "POST", &format!("/sessions/{id}/gaze"), Some(body)).await.0
}

async fn snapshot(app: &Router, id: &str) -> SessionSnapshot {
    let (status, bytes) = call(app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    serde_json::from_slice(&bytes).unwrap()
}

async fn wait_terminal(app: &Router, id: &str) -> SessionSnapshot {
    let start = Instant::now();
    loop {
        let s = snapshot(app, id).await;
        if s.phase.is_terminal() {
            return s;
        }
        assert!(start.elapsed() < Duration::from_secs(30), "session {id} stuck in {:?}", s.phase);
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
}

/// Parse an SSE body into (event name, data) pairs.
fn sse_frames(body: &[u8]) -> Vec<(String, String)> {
    let text = String::from_utf8_lossy(body);
    let mut out = Vec::new();
    for block in text.split("\n\n") {
        let mut name = "message".to_string();
        let mut data = Vec::new();
        for line in block.lines() {
            if let Some(v) = line.strip_prefix("event:") {
                name = v.trim().to_string();
            } else if let Some(v) = line.strip_prefix("data:") {
                data.push(v.trim_start().to_string());
            }
        }
        if !data.is_empty() {
            out.push((name, data.join("\n")));
        }
    }
    out
}

#[tokio::test]
async fn create_returns_201_and_status() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    let id = create(&app, json!({})).await;
    let s = snapshot(&app, &id).await;
    assert_eq!(s.id, id);
    assert_eq!(s.phase, SessionPhase::Observing);
    assert_eq!(s.world.labels(), ["book", "cup", "kettle"]);
    assert_eq!(call(&app, "GET", "/sessions/nope", None).await.0, StatusCode::NOT_FOUND);
    let other = create(&app, json!({"mode": "mock"})).await;
    assert_ne!(id, other);
}

#[tokio::test]
async fn bad_requests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    let (status, _) = call(&app, "POST", "/sessions", Some(json!({"mode": "psychic"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let bad_fixture = json!({"fixture": {"objects": {"table": {"kind": "item"}}}});
    assert_eq!(call(&app, "POST", "/sessions", Some(bad_fixture)).await.0, StatusCode::BAD_REQUEST);
    let id = create(&app, json!({})).await;
    let (status, _) = call(&app, "POST", &format!("/sessions/{id}/gaze"), Some(json!({"gx": 1.0}))).await;
    assert!(status.is_client_error());
    assert_eq!(post_gaze(&app, "nope", &GazeSample::new(0, 1.0, 1.0)).await, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn pour_water_over_http_streams_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    let id = create(&app, json!({"mode": "mock", "fixture": fixture()})).await;
    for g in pour_gaze() {
        assert_eq!(post_gaze(&app, &id, &g).await, StatusCode::ACCEPTED);
    }
    let snap = wait_terminal(&app, &id).await;
    assert_eq!(snap.phase, SessionPhase::Done);
    assert_eq!(snap.world.amount_of("cup"), 150.0);
    assert_eq!(snap.world.amount_of("kettle"), 50.0);

    let (status, body) = call(&app, "GET", &format!("/sessions/{id}/events"), None).await;
    assert_eq!(status, StatusCode::OK);
    let events: Vec<SessionEvent> = sse_frames(&body)
        .into_iter()
        .map(|(name, data)| {
            assert_eq!(name, "message");
            serde_json::from_str(&data).unwrap()
        })
        .collect();
    for (i, e) in events.iter().enumerate() {
        assert_eq!(e.seq, i as u64);
        assert_eq!(e.schema, "event-v1");
    }
    let logged = read_log(&dir.path().join(format!("{id}.jsonl"))).unwrap();
    assert_eq!(logged, events);
    let summary = replay(&logged).unwrap();
    assert_eq!(summary.confirmed, ["pour water into the cup"]);
    audit_safety(&logged).unwrap();

    // Posting to a finished session conflicts.
    assert_eq!(post_gaze(&app, &id, &GazeSample::new(i64::MAX, 1.0, 1.0)).await, StatusCode::CONFLICT);
}

#[tokio::test]
async fn abort_ends_session() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    let id = create(&app, json!({})).await;
    let (status, _) = call(&app, "POST", &format!("/sessions/{id}/abort"), None).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let snap = wait_terminal(&app, &id).await;
    assert_eq!(snap.phase, SessionPhase::Aborted);
    let log = read_log(&dir.path().join(format!("{id}.jsonl"))).unwrap();
    let summary = replay(&log).unwrap();
    assert_eq!(summary.abort_cause.as_deref(), Some("user_abort"));
    assert_eq!(call(&app, "POST", &format!("/sessions/{id}/abort"), None).await.0, StatusCode::CONFLICT);
}

/// Logs of two interleaved sessions equal those of each session run alone.
#[tokio::test]
async fn interleaved_sessions_are_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    let a = create(&app, json!({"mode": "mock"})).await;
    let b = create(&app, json!({"mode": "mock"})).await;
    let ga = pour_gaze();
    // Session b only looks at the kettle, then stops.
    let gb: Vec<GazeSample> = ga.iter().take(400).copied().collect();
    for i in 0..ga.len() {
        assert_eq!(post_gaze(&app, &a, &ga[i]).await, StatusCode::ACCEPTED);
        if let Some(g) = gb.get(i) {
            assert_eq!(post_gaze(&app, &b, g).await, StatusCode::ACCEPTED);
        }
    }
    call(&app, "POST", &format!("/sessions/{b}/abort"), None).await;
    wait_terminal(&app, &a).await;
    wait_terminal(&app, &b).await;

    for (id, gaze, end) in [(&a, &ga, None), (&b, &gb, Some("user_abort"))] {
        let world = fixture().into_world().unwrap();
        let mut m = SessionMachine::new(id.clone(), SessionConfig::default(), model(), Arc::new(MockLlm::default()), world);
        for g in gaze.iter() {
            m.push(SessionInput::Gaze(*g));
        }
        if let Some(cause) = end {
            m.push(SessionInput::Abort(cause.into()));
        }
        let logged = read_log(&dir.path().join(format!("{id}.jsonl"))).unwrap();
        assert_eq!(logged, m.events(), "session {id}");
    }
}

#[tokio::test]
async fn lagging_subscriber_gets_notice() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), Some(4));
    let id = create(&app, json!({"mode": "mock"})).await;
    let req = Request::builder().uri(format!("/sessions/{id}/events")).body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    for g in pour_gaze() {
        post_gaze(&app, &id, &g).await;
    }
    wait_terminal(&app, &id).await;
    let body = resp.into_body().collect().await.unwrap().to_bytes();
    let frames = sse_frames(&body);
    let (name, data) = frames.last().unwrap();
    assert_eq!(name, "notice");
    let v: Value = serde_json::from_str(data).unwrap();
    assert_eq!(v["reason"], "subscriber_lagged");
    assert!(frames[..frames.len() - 1].iter().all(|(n, _)| n == "message"));
    // The session itself was not held back.
    let log = read_log(&dir.path().join(format!("{id}.jsonl"))).unwrap();
    assert!(matches!(log.last().unwrap().body, EventBody::Phase { to: SessionPhase::Done, .. }));
}

#[tokio::test]
async fn serve_reports_bind_failure() {
    let held = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = held.local_addr().unwrap().to_string();
    let dir = tempfile::tempdir().unwrap();
    let cfg = ServiceConfig::new(model(), Arc::new(MockLlm::default()), fixture(), dir.path().to_path_buf());
    let err = gazebot_service::serve(&addr, cfg).await.unwrap_err();
    assert!(err.to_string().contains("bind"));
}

/// Minimal chat-completion endpoint recording what it receives.
fn spawn_chat_server(status: u16, reply: Value) -> (String, Arc<std::sync::Mutex<Vec<(Option<String>, Value)>>>) {
    use axum::routing::post;
    let seen = Arc::new(std::sync::Mutex::new(Vec::new()));
    let seen2 = seen.clone();
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let app = Router::new().route(
                "/v1/chat/completions",
                post(move |headers: axum::http::HeaderMap, body: axum::Json<Value>| {
                    let seen = seen2.clone();
                    let reply = reply.clone();
                    async move {
                        let auth = headers.get("authorization").map(|v| v.to_str().unwrap().to_string());
                        seen.lock().unwrap().push((auth, body.0));
                        (StatusCode::from_u16(status).unwrap(), axum::Json(reply))
                    }
                }),
            );
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    let addr = rx.recv().unwrap();
    (format!("http://{addr}/v1/chat/completions"), seen)
}

#[test]
fn http_client_speaks_chat_completions() {
    let reply = json!({"choices": [{"message": {"role": "assistant", "content": "1. Fetch the cup."}}]});
    let (url, seen) = spawn_chat_server(200, reply);
    let client = HttpLlm::new(url, Some("secret".into()), "m1").unwrap();
    assert_eq!(client.kind(), ClientKind::Http);
    let msgs = [ChatMessage::system("sys"), ChatMessage::user("hi")];
    assert_eq!(client.chat(&msgs).unwrap(), "1. Fetch the cup.");
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].0.as_deref(), Some("Bearer secret"));
    assert_eq!(
        seen[0].1,
        json!({"model": "m1", "messages": [{"role": "system", "content": "sys"}, {"role": "user", "content": "hi"}]})
    );
}

#[test]
fn http_client_maps_failures() {
    let (url, _) = spawn_chat_server(500, json!({"error": "boom"}));
    let client = HttpLlm::new(url, None, "m").unwrap();
    assert!(matches!(client.chat(&[ChatMessage::user("x")]), Err(LlmError::Status(500, _))));

    let (url, _) = spawn_chat_server(200, json!({"choices": []}));
    let client = HttpLlm::new(url, None, "m").unwrap();
    assert!(matches!(client.chat(&[ChatMessage::user("x")]), Err(LlmError::Protocol(_))));

    let client = HttpLlm::new("http://127.0.0.1:1/none", None, "m").unwrap();
    assert!(matches!(client.chat(&[ChatMessage::user("x")]), Err(LlmError::Transport(_))));
}
