//! The HTTP API against a live server on a loopback port.

use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use cbdebug::api::{self, AppState};
use cbdebug::store::RunStore;
use serde_json::{json, Value};

mod schema_check;

use schema_check::Checker;

struct Server {
    base: String,
    agent: ureq::Agent,
}

impl Server {
    fn start(dir: &Path) -> Server {
        let store = RunStore::open(dir).unwrap();
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        listener.set_nonblocking(true).unwrap();
        let addr = listener.local_addr().unwrap();
        thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async move {
                let l = tokio::net::TcpListener::from_std(listener).unwrap();
                api::serve_on(l, AppState::new(store, 2)).await.unwrap();
            });
        });
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        Server {
            base: format!("http://{addr}/api"),
            agent,
        }
    }

    fn get(&self, path: &str) -> (u16, Value) {
        let mut r = self.agent.get(&format!("{}{path}", self.base)).call().unwrap();
        (r.status().as_u16(), r.body_mut().read_json().unwrap_or(Value::Null))
    }

    fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let mut r = self
            .agent
            .post(&format!("{}{path}", self.base))
            .send_json(&body)
            .unwrap();
        (r.status().as_u16(), r.body_mut().read_json().unwrap_or(Value::Null))
    }

    fn wait_for(&self, id: &str, status: &str) -> Value {
        let start = Instant::now();
        loop {
            let (code, s) = self.get(&format!("/runs/{id}/status"));
            assert_eq!(code, 200);
            check("Status", &s);
            if s["status"] == status {
                return s;
            }
            assert_ne!(s["status"], "failed", "{s}");
            assert!(start.elapsed() < Duration::from_secs(120), "timed out waiting for {status}: {s}");
            thread::sleep(Duration::from_millis(50));
        }
    }
}

fn schema_doc() -> Value {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/schemas/api.schema.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// Validates `instance` against the published definition `def`.
fn check(def: &str, instance: &Value) {
    let schema = schema_doc();
    assert!(schema["$defs"].get(def).is_some(), "no schema for {def}");
    let errors = Checker::new(&schema).errors(&json!({ "$ref": format!("#/$defs/{def}") }), instance);
    assert!(errors.is_empty(), "{def}: {errors:?}\n{instance:#}");
}

fn train_config(epochs: usize) -> Value {
    json!({
        "epochs": epochs, "lr_extractor": 0.5, "lr_head": 0.5, "lambda_sparse": 0.02,
        "batch_size": 64, "seed": 1, "freeze_extractor": false, "n_concepts": 16,
        "max_window": 2, "pretrain_epochs": 10
    })
}

#[test]
fn empty_directory_lists_no_runs() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path());
    let (code, body) = s.get("/runs");
    assert_eq!(code, 200);
    assert_eq!(body, json!([]));
    check("RunList", &body);
    let (code, body) = s.get("/runs/nope");
    assert_eq!(code, 404);
    check("Error", &body);
}

#[test]
fn full_debugging_session() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path());

    let (code, rec) = s.post(
        "/runs",
        json!({"run_id": "demo", "preset": "waterbirds", "seed": 1, "train_config": train_config(30)}),
    );
    assert_eq!(code, 201, "{rec}");
    check("RunRecord", &rec);
    assert_eq!(rec["run_id"], "demo");
    assert_eq!(rec["status"], "training");
    let (code, _) = s.post("/runs", json!({"run_id": "demo"}));
    assert_eq!(code, 409);
    s.wait_for("demo", "done");

    let (code, rec) = s.get("/runs/demo");
    assert_eq!(code, 200);
    check("RunRecord", &rec);
    assert_eq!(rec["artifacts"]["model_before"], "model_before.json");
    let (_, list) = s.get("/runs");
    check("RunList", &list);
    assert_eq!(list.as_array().unwrap().len(), 1);

    let (code, concepts) = s.get("/runs/demo/concepts");
    assert_eq!(code, 200);
    check("ConceptList", &concepts);
    let concepts = concepts.as_array().unwrap();
    assert_eq!(concepts.len(), 16);
    assert!(concepts.iter().all(|c| c["active"] == true && c["top_exemplars"].as_array().unwrap().len() == 10));
    let (code, _) = s.get("/runs/demo/concepts?model=after");
    assert_eq!(code, 422);

    // Nothing to retrain with yet.
    let (code, err) = s.post("/runs/demo/retrain", json!({"strategy": "cbdebug"}));
    assert_eq!(code, 422);
    check("Error", &err);
    assert!(err["error"].as_str().unwrap().contains("no feedback recorded"));

    let (code, err) = s.post("/runs/demo/feedback", json!({"c_spur": [1, 99], "source": "human"}));
    assert_eq!(code, 422);
    check("Error", &err);
    assert_eq!(err["concept_id"], 99);

    let (code, fb) = s.post("/runs/demo/feedback", json!({"c_spur": [1, 3], "source": "human"}));
    assert_eq!(code, 200, "{fb}");
    check("FeedbackSet", &fb);
    assert_eq!(fb["c_spur"], json!([1, 3]));
    let (_, rec) = s.get("/runs/demo");
    assert_eq!(rec["artifacts"]["feedback"], "feedback.json");

    let (code, fb) = s.post("/runs/demo/feedback", json!({"source": "rule_oracle", "threshold": 0.5}));
    assert_eq!(code, 200, "{fb}");
    check("FeedbackSet", &fb);
    assert_eq!(fb["source"], "rule_oracle");
    assert!(!fb["c_spur"].as_array().unwrap().is_empty());

    let (code, _) = s.get("/runs/demo/weights/histogram");
    assert_eq!(code, 404);
    let (code, m) = s.get("/runs/demo/metrics");
    assert_eq!(code, 200);
    check("Metrics", &m);
    assert_eq!(m["after"], Value::Null);

    let (code, body) = s.post(
        "/runs/demo/retrain",
        json!({"strategy": "cbdebug", "overrides": {"retrain_epochs": 40}}),
    );
    assert_eq!(code, 202, "{body}");
    check("RunRecord", &body);
    assert_eq!(body["status"], "retraining");
    // One mutation at a time per run.
    let (code, err) = s.post("/runs/demo/retrain", json!({"strategy": "retrain"}));
    assert_eq!(code, 409, "{err}");
    check("Error", &err);
    let (code, _) = s.post("/runs/demo/feedback", json!({"c_spur": [1]}));
    assert_eq!(code, 409);
    // Reads stay available.
    let (code, _) = s.get("/runs/demo/concepts");
    assert_eq!(code, 200);
    s.wait_for("demo", "done");

    let (code, m) = s.get("/runs/demo/metrics");
    assert_eq!(code, 200);
    check("Metrics", &m);
    assert_eq!(m["after"]["groups"].as_array().unwrap().len(), 4);
    assert!(m["concept_report"]["classes"].as_array().unwrap().len() == 2);
    assert!(m["dependence"].is_object());

    let (code, h) = s.get("/runs/demo/weights/histogram?bins=10");
    assert_eq!(code, 200);
    check("Histogram", &h);
    assert_eq!(h["counts"].as_array().unwrap().len(), 10);
    let total: u64 = h["counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum();
    assert_eq!(total, 3498 + 184 + 56 + 1057);

    let (_, after) = s.get("/runs/demo/concepts?model=after");
    check("ConceptList", &after);
    let (_, rec) = s.get("/runs/demo");
    check("RunRecord", &rec);
    assert_eq!(rec["strategy"]["strategy"], "cbdebug");
    assert_eq!(rec["strategy"]["retrain_epochs"], 40);
    for f in ["model_after", "weights", "metrics", "feedback"] {
        let name = rec["artifacts"][f].as_str().unwrap();
        assert!(dir.path().join("demo").join(name).exists(), "{f}");
    }

    // Unsupervised baselines need no feedback and reject bad overrides.
    let (code, _) = s.post("/runs/demo/retrain", json!({"strategy": "jtt", "overrides": {"jtt": {"t": 0, "lambda_up": 5}}}));
    assert_eq!(code, 422);
    let (code, _) = s.post("/runs/demo/retrain", json!({"strategy": "nonsense"}));
    assert_eq!(code, 422);
    let (code, _) = s.post("/runs/demo/retrain", json!({"strategy": "jtt", "overrides": {"retrain_epochs": 2}}));
    assert_eq!(code, 202);
    s.wait_for("demo", "done");
    // JTT learns no sample weights; the stale ones from cbdebug are gone.
    let (code, _) = s.get("/runs/demo/weights/histogram");
    assert_eq!(code, 404);
    let (_, rec) = s.get("/runs/demo");
    assert_eq!(rec["artifacts"]["weights"], Value::Null);
}

#[test]
fn dataset_config_body_and_bad_requests() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path());
    let mut cfg = serde_json::to_value(cbdebug_core::synthdata::DatasetConfig::balanced(4)).unwrap();
    cfg["group_counts"] = json!([
        {"y": 0, "a": 0, "count": 40}, {"y": 0, "a": 1, "count": 10},
        {"y": 1, "a": 0, "count": 10}, {"y": 1, "a": 1, "count": 40}
    ]);
    let (code, rec) = s.post("/runs", json!({"run_id": "custom", "dataset_config": cfg, "train_config": train_config(3)}));
    assert_eq!(code, 201, "{rec}");
    check("RunRecord", &rec);
    assert!(rec.get("preset").is_none());
    s.wait_for("custom", "done");

    for body in [
        json!({"preset": "imagenet"}),
        json!({"preset": "waterbirds", "dataset_config": cfg}),
        json!({"run_id": "../escape"}),
        json!({"unknown_field": 1}),
    ] {
        let (code, err) = s.post("/runs", body.clone());
        assert_eq!(code, 422, "{body}: {err}");
        check("Error", &err);
    }
    let (code, _) = s.get("/runs/custom/weights/histogram?bins=0");
    assert_eq!(code, 422);
}

#[test]
fn corrupt_run_is_reported_failed_and_service_stays_up() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("broken")).unwrap();
    std::fs::write(dir.path().join("broken/run.json"), "{ truncated").unwrap();
    let s = Server::start(dir.path());
    let (code, list) = s.get("/runs");
    assert_eq!(code, 200);
    check("RunList", &list);
    assert_eq!(list[0]["status"], "failed");
    let (code, rec) = s.get("/runs/broken");
    assert_eq!(code, 200);
    assert_eq!(rec["status"], "failed");
    let (code, err) = s.post("/runs/broken/feedback", json!({"c_spur": []}));
    assert!(code >= 400, "{code}");
    check("Error", &err);
    let (code, _) = s.get("/runs");
    assert_eq!(code, 200);
    assert_eq!(std::fs::read_to_string(dir.path().join("broken/run.json")).unwrap(), "{ truncated");
}

#[test]
fn port_in_use_is_an_error() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::open(dir.path()).unwrap();
    let rt = tokio::runtime::Runtime::new().unwrap();
    let err = rt.block_on(api::serve(addr, AppState::new(store, 1))).unwrap_err();
    assert!(!err.is_validation());
    assert!(err.to_string().contains("cannot listen"), "{err}");
}
