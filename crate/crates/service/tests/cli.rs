mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::spawn_fake_llm;
use dynmap_core::road::RoadNetwork;
use serde_json::{json, Value};

fn dynmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynmap"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env("RUST_BACKTRACE", "0")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = dynmap(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_json(path: &Path, v: Value) {
    std::fs::write(path, v.to_string()).unwrap();
}

fn report(dir: &Path, tag: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(format!("report.{tag}.json"))).unwrap()).unwrap()
}

/// sim run -> qa generate -> eval run; the oracle backend grades everything
/// correct and a dead endpoint stops the run with a nonzero status.
#[test]
fn sim_qa_eval_pipeline() {
    let dir = std::env::temp_dir().join(format!("dynmap-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let (sim, scenes, dataset) = (dir.join("sim.json"), dir.join("scenes.jsonl"), dir.join("dataset.jsonl"));
    write_json(&sim, json!({"seed": 3, "vehicle_count": 40, "av_count": 4, "duration": 20.0}));

    ok(&["sim", "run", "--config", p(&sim), "--out", p(&scenes)]);
    let lines: Vec<Value> = std::fs::read_to_string(&scenes)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 100);
    assert!(lines.iter().enumerate().all(|(i, s)| s["scene_id"] == json!(i)));

    let out = dynmap(&["qa", "generate", "--scenes", p(&scenes), "-n", "80", "--seed", "5"]);
    assert!(out.status.success());
    let hist = String::from_utf8_lossy(&out.stderr);
    assert!(hist.contains("existence") && hist.contains("80"), "{hist}");
    assert_eq!(std::fs::read_to_string(&dataset).unwrap().lines().count(), 80);

    let oracle = dir.join("oracle.json");
    write_json(&oracle, json!({"kind": "mock_oracle"}));
    let table = ok(&["eval", "run", "--dataset", p(&dataset), "--backend", p(&oracle)]);
    assert!(table.contains("model: mock_oracle") && table.contains("Average"), "{table}");
    let r = report(&dir, "cop");
    assert_eq!(r["a_q"], 100.0);
    assert_eq!(r["a_c"], 100.0);
    assert_eq!(r["n"], 80);
    assert_eq!(std::fs::read_to_string(dir.join("grades.cop.jsonl")).unwrap().lines().count(), 80);

    ok(&["eval", "run", "--dataset", p(&dataset), "--backend", p(&oracle), "--pipeline", "osp4", "--no-prefix"]);
    let r = report(&dir, "osp4.no-s");
    assert_eq!(r["a_c"], Value::Null);
    assert_eq!(r["a_q"], 100.0);

    let endpoint = spawn_fake_llm(RoadNetwork::net_cross().road_aliases());
    let remote = dir.join("remote.json");
    write_json(&remote, json!({"kind": "remote", "endpoint": endpoint, "model": "keyword-stub"}));
    let out_dir = dir.join("remote-run");
    let table = ok(&["eval", "run", "--dataset", p(&dataset), "--backend", p(&remote), "--out-dir", p(&out_dir), "--no-rule"]);
    assert!(table.contains("model: keyword-stub") && table.contains("r: off"), "{table}");
    let r = report(&out_dir, "cop.no-r");
    assert_eq!(r["n"], 80);
    assert_eq!(r["failures"], json!({}));

    let dead = dir.join("dead.json");
    write_json(
        &dead,
        json!({"kind": "remote", "endpoint": "http://127.0.0.1:9/v1/chat/completions", "model": "x", "timeout_ms": 300}),
    );
    let out = dynmap(&["eval", "run", "--dataset", p(&dataset), "--backend", p(&dead), "--out-dir", p(&dir.join("dead"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("backend failed"));
    assert!(dir.join("dead/grades.cop.jsonl").exists());

    let out = dynmap(&["eval", "run", "--dataset", p(&dataset), "--backend", p(&oracle), "--pipeline", "osp9"]);
    assert!(!out.status.success());
}

#[test]
fn ask_prints_a_cop_result() {
    let out = ok(&["ask", "How many vehicles are in front of me?", "--warmup", "3"]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["task"], 9);
    assert_eq!(v["params"]["relation"], "front");
    assert_eq!(v["ego_id"], "AV001");
    assert_eq!(v["numeric"]["values"][0], json!(v["numeric"]["matched_ids"].as_array().unwrap().len() as f64));

    let out = dynmap(&["ask", "How many vehicles are in front of me?", "--warmup", "3", "--ego", "AV999"]);
    assert!(!out.status.success());
}
