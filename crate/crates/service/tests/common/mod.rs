#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::routing::post;
use axum::{Json, Router};
use dynmap_core::llm::{BackendConfig, KeywordInterpreter};
use dynmap_service::ServiceConfig;
use serde_json::{json, Value};

pub fn schema_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../docs/schemas")
}

/// Panics with every violation when `value` does not match the named schema.
pub fn assert_schema(name: &str, value: &Value) {
    let path = schema_dir().join(format!("{name}.schema.json"));
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(value).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{name}: {errors:?}\n{value}");
}

pub fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(20)))
        .build()
        .into()
}

pub fn get(url: &str) -> (u16, Value) {
    let mut r = agent().get(url).call().unwrap();
    (r.status().as_u16(), r.body_mut().read_json().unwrap())
}

pub fn post_json(url: &str, body: &Value) -> (u16, Value) {
    let mut r = agent().post(url).send_json(body).unwrap();
    (r.status().as_u16(), r.body_mut().read_json().unwrap())
}

/// Serves `router` on an ephemeral port in a background runtime.
pub fn serve(router: Router) -> String {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, router).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

/// A 5 Hz service on a small traffic scene with the keyword-rule backend.
pub fn small_config(backend: BackendConfig) -> ServiceConfig {
    let mut cfg = ServiceConfig::new(backend);
    cfg.sim_config = Some(write_temp_sim());
    cfg
}

fn write_temp_sim() -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dynmap-service-test-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("sim.json");
    std::fs::write(&path, json!({"seed": 11, "vehicle_count": 40, "av_count": 4}).to_string()).unwrap();
    path
}

fn question_of(prompt: &str) -> &str {
    prompt.lines().rev().find_map(|l| l.strip_prefix("Question: ")).unwrap_or("")
}

/// Chat-completion stand-in that answers each prompt kind with keyword rules.
pub fn spawn_fake_llm(aliases: Vec<(String, String)>) -> String {
    let interp = Arc::new(KeywordInterpreter::new(aliases));
    let app = Router::new().route(
        "/v1/chat/completions",
        post(move |Json(body): Json<Value>| {
            let interp = Arc::clone(&interp);
            async move {
                let prompt = body["messages"][0]["content"].as_str().unwrap_or("");
                let q = question_of(prompt);
                let content = if prompt.contains(r#"{"task": <integer 1-10>}"#) {
                    match interp.classify(q) {
                        Some(t) => json!({ "task": t.number() }).to_string(),
                        None => "unsure".into(),
                    }
                } else if prompt.contains("keys vtype, color, relation and road") {
                    serde_json::to_string(&interp.extract(q)).unwrap()
                } else {
                    json!({"answer": "See the numeric result.", "advice": "Keep your distance."}).to_string()
                };
                Json(json!({"choices": [{"message": {"role": "assistant", "content": content}}]}))
            }
        }),
    );
    format!("{}/v1/chat/completions", serve(app))
}
