mod common;

use std::io::{BufRead, BufReader};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use ureq::Agent;
use wordsmith::service::Service;
use wordsmith::Config;
use wordsmith_core::motion::{RootPose, Skeleton};
use wordsmith_core::prompts::{LlmClient, LlmConfig};

struct Server {
    base: String,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
    _dir: tempfile::TempDir,
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn start(edit: impl FnOnce(&mut Config)) -> Server {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny(dir.path());
    edit(&mut cfg);
    let svc = Service::open(cfg, LlmClient::new(LlmConfig::default())).unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let (addr_tx, addr_rx) = std::sync::mpsc::channel();
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            addr_tx.send(listener.local_addr().unwrap()).unwrap();
            wordsmith::http::serve(svc, listener, async {
                let _ = rx.await;
            })
            .await
            .unwrap();
        });
    });
    let addr = addr_rx.recv().unwrap();
    Server { base: format!("http://{addr}"), stop: Some(tx), thread: Some(thread), _dir: dir }
}

fn agent() -> Agent {
    Agent::config_builder().http_status_as_error(false).timeout_global(Some(Duration::from_secs(300))).build().into()
}

fn get(s: &Server, path: &str) -> (u16, String) {
    let mut r = agent().get(&format!("{}{path}", s.base)).call().unwrap();
    (r.status().as_u16(), r.body_mut().read_to_string().unwrap())
}

fn get_json(s: &Server, path: &str) -> (u16, Value) {
    let (code, body) = get(s, path);
    (code, serde_json::from_str(&body).unwrap_or(Value::Null))
}

fn post(s: &Server, path: &str, body: Value) -> (u16, Value) {
    let mut r = agent().post(&format!("{}{path}", s.base)).send_json(&body).unwrap();
    let text = r.body_mut().read_to_string().unwrap();
    (r.status().as_u16(), serde_json::from_str(&text).unwrap_or(Value::Null))
}

fn wait_done(s: &Server, run: &str) -> Value {
    let deadline = Instant::now() + Duration::from_secs(300);
    loop {
        let (code, r) = get_json(s, &format!("/api/runs/{run}"));
        assert_eq!(code, 200);
        if r["stage"] == "done" || r["stage"] == "failed" {
            return r;
        }
        assert!(Instant::now() < deadline, "run {run} stuck in {}", r["stage"]);
        std::thread::sleep(Duration::from_millis(50));
    }
}

#[test]
fn health_reports_ok_and_version() {
    let s = start(|_| {});
    let (code, body) = get_json(&s, "/api/health");
    assert_eq!(code, 200);
    assert_eq!(body, json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }));
}

#[test]
fn command_flow_end_to_end() {
    let s = start(|_| {});
    let (code, session) = post(&s, "/api/sessions", json!({}));
    assert_eq!(code, 201);
    let sid = session["id"].as_str().unwrap().to_string();
    let (_, list) = get_json(&s, "/api/sessions");
    assert_eq!(list.as_array().unwrap().len(), 1);

    let (code, sub) = post(&s, &format!("/api/sessions/{sid}/commands"), json!({ "text": "walk forward" }));
    assert_eq!(code, 202, "{sub}");
    let run = sub["run_id"].as_str().unwrap().to_string();
    assert_eq!(sub["prompt"], "A person is walking forward.");
    assert_eq!(sub["closest_prompt_in_history"], Value::Null);
    assert_eq!(sub["warm_start"], Value::Null);
    let done = wait_done(&s, &run);
    assert_eq!(done["stage"], "done", "{done}");

    // Rewards come back as CSV, identical across requests.
    let mut r = agent().get(&format!("{}/api/runs/{run}/rewards", s.base)).call().unwrap();
    assert_eq!(r.headers()["content-type"], "text/csv");
    let csv = r.body_mut().read_to_string().unwrap();
    assert_eq!(csv.lines().count(), done["iterations"].as_u64().unwrap() as usize + 1);
    assert_eq!(get(&s, &format!("/api/runs/{run}/rewards")).1, csv);

    // The rollout is JSON lines a client can replay with its own FK.
    let (code, body) = get(&s, &format!("/api/runs/{run}/rollout?checkpoint=best"));
    assert_eq!(code, 200);
    let lines: Vec<Value> = body.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines[0]["type"], "header");
    assert_eq!(lines[0]["checkpoint"], "best");
    assert_eq!(lines[0]["checkpoint_id"], done["artifacts"]["best_checkpoint"]);
    let sk: Skeleton = serde_json::from_value(lines[0]["skeleton"].clone()).unwrap();
    assert!(lines.len() > 10);
    for f in &lines[1..] {
        let root: [f64; 3] = serde_json::from_value(f["root"].clone()).unwrap();
        let q: Vec<f64> = serde_json::from_value(f["q"].clone()).unwrap();
        let fk = sk.fk(&RootPose::new(root[0], root[1], root[2]), &q).unwrap();
        let eff: Vec<[f64; 2]> = serde_json::from_value(f["effectors"].clone()).unwrap();
        for (a, b) in eff.iter().zip(&fk.effectors) {
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }
    let (_, reference) = get(&s, &format!("/api/runs/{run}/rollout?source=reference&steps=5"));
    assert_eq!(reference.lines().count(), 6);
    let (code, _) = get(&s, &format!("/api/runs/{run}/rollout?checkpoint=worst"));
    assert_eq!(code, 400);

    let (_, ck) = get_json(&s, "/api/checkpoints");
    assert_eq!(ck["mappings"][0]["prompt"], "A person is walking forward.");
    assert_eq!(ck["mappings"][0]["id"], done["artifacts"]["checkpoint"]);
    let id = ck["mappings"][0]["id"].as_str().unwrap();
    let mut r = agent().get(&format!("{}/api/checkpoints/{id}", s.base)).call().unwrap();
    let bytes = r.body_mut().read_to_vec().unwrap();
    assert_eq!(wordsmith_core::checkpoint::content_id(&bytes), id);

    // A refinement warm-starts from the walk policy.
    let (code, sub) = post(&s, &format!("/api/sessions/{sid}/commands"), json!({ "text": "faster" }));
    assert_eq!(code, 202);
    assert_eq!(sub["closest_prompt_in_history"], "A person is walking forward.");
    assert_eq!(sub["warm_start"]["checkpoint_id"], done["artifacts"]["checkpoint"]);
    let run2 = sub["run_id"].as_str().unwrap().to_string();
    wait_done(&s, &run2);
    let (_, view) = get_json(&s, &format!("/api/sessions/{sid}"));
    assert_eq!(view["turns"].as_array().unwrap().len(), 2);
    assert_eq!(view["turns"][1]["warm_start"]["prompt"], "A person is walking forward.");
}

#[test]
fn errors_map_to_status_codes() {
    let s = start(|_| {});
    let (_, session) = post(&s, "/api/sessions", json!({ "overrides": { "budget": 1u64 << 40 } }));
    let sid = session["id"].as_str().unwrap().to_string();
    let path = format!("/api/sessions/{sid}/commands");

    let (code, body) = post(&s, &path, json!({ "text": "do a backflip" }));
    assert_eq!(code, 422);
    assert_eq!(body["error"], "unknown_verb");
    assert!(body["vocabulary"].as_array().unwrap().iter().any(|v| v == "wave"));

    let (code, first) = post(&s, &path, json!({ "text": "hop" }));
    assert_eq!(code, 202);
    let (code, busy) = post(&s, &path, json!({ "text": "kick" }));
    assert_eq!(code, 409);
    assert_eq!(busy["error"], "busy");
    assert_eq!(busy["active_run"], first["run_id"]);

    assert_eq!(post(&s, "/api/sessions/s42/commands", json!({ "text": "hop" })).0, 404);
    assert_eq!(get(&s, "/api/runs/r42").0, 404);
    assert_eq!(get(&s, "/api/runs/r42/rewards").0, 404);
    assert_eq!(get(&s, &format!("/api/checkpoints/{}", "0".repeat(64))).0, 404);
    assert_eq!(post(&s, &path, json!({ "words": "hop" })).0, 422);
    assert_eq!(post(&s, "/api/sessions", json!({ "overrides": { "envs": 0 } })).0, 400);
    // Rollouts need a finished run.
    let (code, _) = get(&s, &format!("/api/runs/{}/rollout", first["run_id"].as_str().unwrap()));
    assert_eq!(code, 404);
}

#[test]
fn event_stream_pushes_stages_rewards_and_completion() {
    let s = start(|c| c.train.total_steps = 128 * 80);
    let (_, session) = post(&s, "/api/sessions", json!({}));
    let sid = session["id"].as_str().unwrap().to_string();

    let stream = agent().get(&format!("{}/api/events", s.base)).call().unwrap();
    assert_eq!(stream.headers()["content-type"], "text/event-stream");
    let mut reader = BufReader::new(stream.into_body().into_reader());
    let started = Instant::now();
    let (code, sub) = post(&s, &format!("/api/sessions/{sid}/commands"), json!({ "text": "kick" }));
    assert_eq!(code, 202);
    let run = sub["run_id"].as_str().unwrap();

    let mut events: Vec<(String, Value)> = Vec::new();
    let mut name = String::new();
    loop {
        let mut line = String::new();
        assert!(reader.read_line(&mut line).unwrap() > 0, "stream ended early");
        let line = line.trim_end();
        if let Some(n) = line.strip_prefix("event:") {
            name = n.trim().to_string();
        } else if let Some(d) = line.strip_prefix("data:") {
            let v: Value = serde_json::from_str(d.trim()).unwrap();
            assert_eq!(v["type"], name);
            events.push((name.clone(), v));
            if name == "run_completed" {
                break;
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert_eq!(events[0].0, "run_created");
    assert!(events.iter().all(|(_, v)| v["run_id"] == run));
    let stages: Vec<&str> =
        events.iter().filter(|(n, _)| n == "stage").map(|(_, v)| v["payload"]["stage"].as_str().unwrap()).collect();
    assert_eq!(stages, ["retargeting", "training", "done"]);
    let rewards: Vec<&Value> = events.iter().filter(|(n, _)| n == "reward").map(|(_, v)| &v["payload"]).collect();
    assert!(!rewards.is_empty());
    assert!(rewards.len() as f64 <= elapsed * 5.0 + 1.0, "{} reward events in {elapsed:.2}s", rewards.len());
    assert!(rewards.windows(2).all(|w| w[0]["step"].as_u64() < w[1]["step"].as_u64()));
    assert_eq!(events.last().unwrap().1["payload"]["run"]["stage"], "done");
}

#[test]
fn event_stream_filters_by_run() {
    let s = Arc::new(start(|_| {}));
    let (_, a) = post(&s, "/api/sessions", json!({}));
    let (_, b) = post(&s, "/api/sessions", json!({}));
    let (_, first) =
        post(&s, &format!("/api/sessions/{}/commands", a["id"].as_str().unwrap()), json!({ "text": "wave" }));
    let first = first["run_id"].as_str().unwrap().to_string();
    wait_done(&s, &first);
    // Run ids are sequential, so the next one is known in advance.
    let next = format!("r{}", first[1..].parse::<u64>().unwrap() + 1);
    let stream = agent().get(&format!("{}/api/events?run_id={next}", s.base)).call().unwrap();
    let mut reader = BufReader::new(stream.into_body().into_reader());
    post(&s, &format!("/api/sessions/{}/commands", b["id"].as_str().unwrap()), json!({ "text": "hop" }));
    let mut line = String::new();
    let mut kinds = Vec::new();
    while !kinds.contains(&"run_completed".to_string()) {
        line.clear();
        reader.read_line(&mut line).unwrap();
        if let Some(d) = line.trim_end().strip_prefix("data:") {
            let v: Value = serde_json::from_str(d.trim()).unwrap();
            assert_eq!(v["run_id"], next.as_str());
            kinds.push(v["type"].as_str().unwrap().to_string());
        }
    }
    assert!(!kinds.contains(&"session_created".to_string()));
}
