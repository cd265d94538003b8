use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

fn gazebot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gazebot")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = gazebot(args);
    assert!(
        out.status.success(),
        "gazebot {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn first_trial(data: &Path) -> std::path::PathBuf {
    let subj = data.join("subjects").join("s01").join("trials");
    let mut trials: Vec<_> = std::fs::read_dir(&subj).unwrap().map(|e| e.unwrap().path()).collect();
    trials.sort();
    trials.into_iter().find(|p| p.ends_with("intent-r1")).unwrap()
}

#[test]
fn data_features_train_and_system_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = ok(&["gen-data", "--seed", "7", "--out", s(&data), "--subjects", "2", "--reps", "5"]);
    assert!(out.contains("wrote 20 trials"), "{out}");

    let trial = first_trial(&data);
    let stats = ok(&["ingest", "--gaze", s(&trial.join("gaze.jsonl")), "--frames", s(&trial.join("frames.jsonl"))]);
    let v: serde_json::Value = serde_json::from_str(&stats).unwrap();
    assert!(v["gaze_samples"].as_u64().unwrap() > 0);
    assert!((v["mean_gaze_rate_hz"].as_f64().unwrap() - 120.0).abs() < 1.0);

    let feats = dir.path().join("windows.jsonl");
    ok(&[
        "features",
        "--frames",
        s(&trial.join("frames.jsonl")),
        "--gaze",
        s(&trial.join("gaze.jsonl")),
        "--marks",
        s(&trial.join("marks.jsonl")),
        "--sw",
        "30",
        "--stride",
        "10",
        "--out",
        s(&feats),
    ]);
    let text = std::fs::read_to_string(&feats).unwrap();
    let mut positives = 0;
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        assert_eq!(keys.len(), 4);
        for k in ["object_id", "start", "values", "label"] {
            assert!(keys.contains(&k));
        }
        assert_eq!(v["start"].as_u64().unwrap() % 10, 0);
        assert_eq!(v["values"].as_array().unwrap().len(), 30);
        positives += v["label"].as_u64().unwrap();
    }
    assert!(positives > 0);

    let ckpt = dir.path().join("model.ckpt");
    ok(&["train", "--data", s(&data), "--out", s(&ckpt), "--epochs", "2"]);
    let head: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&ckpt).unwrap()).unwrap();
    assert_eq!(head["format"], "intentnet-v1");

    let report = dir.path().join("system.json");
    let table = ok(&["eval", "--mode", "system", "--model", s(&ckpt), "--json", s(&report)]);
    assert!(table.contains("Recognition"), "{table}");
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(v["report"]["total"]["recognition"]["all"].as_u64().unwrap() == 5);
}

#[test]
fn gradcheck_passes_small_run() {
    let out = ok(&["gradcheck", "--probes", "10", "--seeds", "1", "--fault-control"]);
    assert!(out.contains("PASS"), "{out}");
    assert!(out.contains("faulty backward"));
}

#[test]
fn bad_arguments_fail() {
    assert!(!gazebot(&["eval", "--mode", "sideways"]).status.success());
    assert!(!gazebot(&["eval", "--mode", "fivefold"]).status.success());
    assert!(!gazebot(&["ingest", "--gaze", "/nonexistent", "--frames", "/nonexistent"]).status.success());
}

#[test]
fn serve_accepts_sessions_and_logs_replay() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--out", s(&data), "--subjects", "1", "--reps", "1"]);
    let ckpt = dir.path().join("model.ckpt");
    ok(&["train", "--data", s(&data), "--out", s(&ckpt), "--epochs", "1"]);
    let fixture = dir.path().join("world.json");
    std::fs::write(
        &fixture,
        r#"{"objects":{"kettle":{"kind":"vessel","cell":[0,0],"contents":{"substance":"water","amount":200,"capacity":1000}},
            "cup":{"kind":"container","cell":[0,2],"contents":{"amount":0,"capacity":150}}}}"#,
    )
    .unwrap();
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let bind = format!("127.0.0.1:{port}");
    let logs = dir.path().join("logs");
    let mut child = Command::new(env!("CARGO_BIN_EXE_gazebot"))
        .args(["serve", "--bind", &bind, "--model", s(&ckpt), "--fixture", s(&fixture), "--llm", "mock"])
        .args(["--logs", s(&logs)])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();

    let request = |method: &str, path: &str, body: &str| -> Option<String> {
        let mut stream = TcpStream::connect(&bind).ok()?;
        let req = format!(
            "{method} {path} HTTP/1.1\r\nHost: x\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        );
        stream.write_all(req.as_bytes()).ok()?;
        let mut resp = String::new();
        stream.read_to_string(&mut resp).ok()?;
        Some(resp)
    };
    let start = Instant::now();
    let created = loop {
        if let Some(r) = request("POST", "/sessions", "{}") {
            break r;
        }
        assert!(start.elapsed() < Duration::from_secs(20), "server did not start");
        std::thread::sleep(Duration::from_millis(50));
    };
    assert!(created.starts_with("HTTP/1.1 201"), "{created}");
    let id = created.split("\"id\":\"").nth(1).unwrap().split('"').next().unwrap().to_string();
    let aborted = request("POST", &format!("/sessions/{id}/abort"), "").unwrap();
    assert!(aborted.starts_with("HTTP/1.1 202"), "{aborted}");
    let log = logs.join(format!("{id}.jsonl"));
    let start = Instant::now();
    while !std::fs::read_to_string(&log).unwrap_or_default().contains("\"aborted\"") {
        assert!(start.elapsed() < Duration::from_secs(10));
        std::thread::sleep(Duration::from_millis(20));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    let summary = ok(&["replay", "--log", s(&log)]);
    assert!(summary.contains("user_abort"), "{summary}");
}
