use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Run {
    /// Noise-free dataset plus a config small enough to train in seconds.
    fn new() -> Run {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let run = Run { _dir: dir, root };
        let config = json!({
            "data": {"path": run.path("data.jsonl"), "artifacts": run.path("artifacts"), "split": [0.5, 0.2, 0.3]},
            "model": {"dim": 8, "epochs": 2, "batch_size": 16, "kg": {"dim": 8, "epochs": 20}},
            "policy": {"hidden": 8, "dagger_iterations": 1, "dagger_episodes": 20, "dagger_epochs": 2, "rl_iterations": 1, "rl_batch_episodes": 4},
        });
        std::fs::write(run.path("config.json"), config.to_string()).unwrap();
        let out = run.msmcr(&["synth", "--noise-free", "--out", run.path("data.jsonl").to_str().unwrap()]);
        assert!(out.status.success(), "{}", stderr(&out));
        run
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn command(&self, args: &[&str]) -> Command {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_msmcr"));
        cmd.arg("--config").arg(self.path("config.json")).args(args).env("RUST_LOG", "warn").env_remove("MSMCR_ARTIFACTS");
        cmd
    }

    fn msmcr(&self, args: &[&str]) -> Output {
        self.command(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.msmcr(args);
        assert!(out.status.success(), "msmcr {args:?} failed: {}", stderr(&out));
        String::from_utf8(out.stdout).unwrap()
    }

    fn first_user_and_item(&self) -> (String, String) {
        let text = std::fs::read_to_string(self.path("data.jsonl")).unwrap();
        let line = text.lines().map(|l| serde_json::from_str::<Value>(l).unwrap()).find(|v| v["type"] == "interaction").unwrap();
        (line["user"].as_str().unwrap().to_string(), line["item"].as_str().unwrap().to_string())
    }
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn config_prints_parseable_defaults_with_overrides() {
    let run = Run::new();
    let v: Value = serde_json::from_str(&run.ok(&["config"])).unwrap();
    assert_eq!(v["model"]["dim"], 8);
    assert_eq!(v["env"]["max_turns"], 10);
    assert_eq!(v["env"]["list_size"], 10);
}

#[test]
fn ingest_writes_id_map() {
    let run = Run::new();
    run.ok(&["ingest"]);
    let ids: Value = serde_json::from_str(&std::fs::read_to_string(run.path("artifacts/ids.json")).unwrap()).unwrap();
    assert!(ids.is_object());
}

#[test]
fn missing_checkpoint_is_a_clean_error() {
    let run = Run::new();
    let out = run.msmcr(&["eval", "--agent", "mscaa"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("Error"), "{}", stderr(&out));
}

#[test]
fn malformed_dataset_is_rejected() {
    let run = Run::new();
    std::fs::write(run.path("data.jsonl"), "{\"type\":\"item\",\"item\":\"a\"}\nnot json\n").unwrap();
    let out = run.msmcr(&["ingest"]);
    assert!(!out.status.success());
}

#[test]
fn train_evaluate_and_inspect() {
    let run = Run::new();
    run.ok(&["train-all"]);
    for name in ["kg.json", "rec.json", "policy_dagger.json", "policy.json"] {
        assert!(run.path("artifacts").join(name).exists(), "{name} missing");
    }

    let oracle: Value = serde_json::from_str(&run.ok(&["eval", "--agent", "oracle", "--json"])).unwrap();
    assert_eq!(oracle["sr_at"].as_array().unwrap().last().unwrap().as_f64(), Some(1.0));
    let log = run.path("artifacts/episodes_oracle_test.jsonl");
    let again: Value = serde_json::from_str(&run.ok(&["eval", "--episodes", log.to_str().unwrap(), "--json"])).unwrap();
    assert_eq!(oracle, again);

    let first: Value = serde_json::from_str(&run.ok(&["eval", "--agent", "mscaa", "--json"])).unwrap();
    let second: Value = serde_json::from_str(&run.ok(&["eval", "--agent", "mscaa", "--json"])).unwrap();
    assert_eq!(first, second);
    let table = run.ok(&["eval", "--agent", "maxe", "--curves", run.path("curves.csv").to_str().unwrap()]);
    assert!(table.contains("maxe"));
    assert!(std::fs::read_to_string(run.path("curves.csv")).unwrap().lines().count() > 1);

    let (user, item) = run.first_user_and_item();
    let state = json!({"user": user, "previous_items": [item], "accepted_attributes": [], "rejected_attributes": [], "unknown_attributes": [], "rejected_items": []});
    std::fs::write(run.path("state.json"), state.to_string()).unwrap();
    let ranking: Value = serde_json::from_str(&run.ok(&["rec-eval", "--state", run.path("state.json").to_str().unwrap(), "--top", "5"])).unwrap();
    let items = ranking["items"].as_array().unwrap();
    assert_eq!(items.len(), 5);
    let scores: Vec<f64> = items.iter().map(|r| r["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));

    let trace: Value = serde_json::from_str(&run.ok(&["policy-trace"])).unwrap();
    assert!(trace.is_object());
    assert!(run.ok(&["simulate", "--count", "2"]).contains("outcome"));

    serve_round_trip(&run, &user, &item);
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn http(addr: &str, method: &str, path: &str, body: Option<&Value>) -> (u16, Value) {
    let mut stream = TcpStream::connect(addr).unwrap();
    let body = body.map(|b| b.to_string()).unwrap_or_default();
    write!(stream, "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}", body.len()).unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    let status = response.split_whitespace().nth(1).unwrap().parse().unwrap();
    let payload = response.split_once("\r\n\r\n").map(|(_, b)| b).unwrap_or("");
    (status, serde_json::from_str(payload).unwrap_or(Value::Null))
}

fn wait_for(addr: &str) {
    let start = Instant::now();
    while TcpStream::connect(addr).is_err() {
        assert!(start.elapsed() < Duration::from_secs(60), "service did not start");
        std::thread::sleep(Duration::from_millis(100));
    }
}

/// Plays one human conversation over HTTP and scores the persisted log.
fn serve_round_trip(run: &Run, user: &str, item: &str) {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let log = run.path("service.jsonl");
    let _server = Server(run.command(&["serve", "--bind", &addr, "--episode-log", log.to_str().unwrap()]).stdout(Stdio::null()).stderr(Stdio::null()).spawn().unwrap());
    wait_for(&addr);

    let (status, created) = http(&addr, "POST", "/v1/sessions", Some(&json!({"user": user, "previous_items": [item]})));
    assert_eq!(status, 200, "{created}");
    let id = created["id"].as_str().unwrap().to_string();
    let (status, _) = http(&addr, "POST", "/v1/sessions/nope/turn", None);
    assert_eq!(status, 404);

    let mut activated = true;
    loop {
        let (status, action) = http(&addr, "POST", &format!("/v1/sessions/{id}/turn"), None);
        assert_eq!(status, 200, "{action}");
        let feedback = if action["kind"] == "recommend" {
            json!({"feedback": "accept_item", "item": action["items"][0]["item"]})
        } else {
            let b = json!({"feedback": "accept", "activated": activated});
            activated = false;
            b
        };
        let (status, step) = http(&addr, "POST", &format!("/v1/sessions/{id}/feedback"), Some(&feedback));
        assert_eq!(status, 200, "{step}");
        if step["done"] == true {
            assert!(step["success"].is_object());
            break;
        }
    }
    let (_, metrics) = http(&addr, "GET", "/v1/metrics", None);
    assert_eq!(metrics["episodes"], 1);

    let scored: Value = serde_json::from_str(&run.ok(&["eval", "--episodes", log.to_str().unwrap(), "--json"])).unwrap();
    assert_eq!(scored["sr_at"].as_array().unwrap().last().unwrap().as_f64(), Some(1.0));
    assert!(Path::new(&log).exists());
}
