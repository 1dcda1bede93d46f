use std::collections::HashMap;
use std::sync::Arc;

use dynmap_core::bus::{read_scene_stream, LinguisticScene};
use dynmap_core::cop::PromptSet;
use dynmap_core::eval::{compute_metrics, run_eval, EvalError, EvalOptions, Pipeline, ReportConfig};
use dynmap_core::llm::{final_text, BackendConfig, MockOracle, MockScripted, RemoteBackend};
use dynmap_core::pipeline::{render_stream, run_scenes, PipelineOptions};
use dynmap_core::qa::{generate_dataset, read_dataset, write_dataset, GenOptions, TemplateSet};
use dynmap_core::road::RoadNetwork;
use dynmap_core::traffic::SimConfig;

fn sim(seed: u64) -> SimConfig {
    SimConfig {
        seed,
        duration: 30.0,
        ..SimConfig::default()
    }
}

fn scenes(seed: u64) -> Vec<LinguisticScene> {
    let net = Arc::new(RoadNetwork::net_cross());
    let raw = run_scenes(sim(seed), net, &PipelineOptions::default()).unwrap();
    // Evaluate on the canonical rendering, exactly as a consumer reads it.
    read_scene_stream(&render_stream(&raw)).unwrap()
}

fn by_id(scenes: &[LinguisticScene]) -> HashMap<u64, LinguisticScene> {
    scenes.iter().map(|s| (s.scene_id, s.clone())).collect()
}

fn opts(n: usize, seed: u64) -> GenOptions {
    GenOptions {
        n,
        seed,
        prefix_on: true,
    }
}

#[test]
fn scene_stream_round_trips() {
    let net = Arc::new(RoadNetwork::net_cross());
    let raw = run_scenes(sim(3), net, &PipelineOptions::default()).unwrap();
    let text = render_stream(&raw);
    let parsed = read_scene_stream(&text).unwrap();
    assert_eq!(render_stream(&parsed), text);
}

#[test]
fn oracle_cop_scores_full_marks() {
    let sc = scenes(7);
    let ds = generate_dataset(&sc, &TemplateSet::shipped(), &opts(300, 1)).unwrap();
    let net = RoadNetwork::net_cross();
    let oracle = MockOracle::new(&ds.pairs, net.road_aliases());
    let prompts = PromptSet::default();
    let o = EvalOptions {
        concurrency: 4,
        ..EvalOptions::default()
    };
    let recs = run_eval(&ds.pairs, &by_id(&sc), &oracle, &prompts, Some(&net), &o).unwrap();
    let report = compute_metrics(
        &recs,
        ReportConfig {
            model: "mock_oracle".into(),
            pipeline: Pipeline::Cop,
            prefix_on: true,
            rule_on: true,
        },
    )
    .unwrap();
    let wrong: Vec<_> = recs.iter().filter(|r| !r.numeric_correct).take(3).collect();
    assert!(wrong.is_empty(), "{wrong:#?}");
    assert_eq!(report.a_q, 100.0);
    assert_eq!(report.a_c, Some(100.0));
    assert_eq!(report.rows.iter().map(|r| r.n_q).sum::<usize>(), 300);
}

#[test]
fn dataset_file_round_trip() {
    let sc = scenes(9);
    let ds = generate_dataset(&sc, &TemplateSet::shipped(), &opts(50, 2)).unwrap();
    let text = write_dataset(&ds.pairs);
    assert_eq!(read_dataset(&text).unwrap(), ds.pairs);
}

#[test]
fn scripted_one_shot_grades_ground_truth_strings() {
    let sc = scenes(11);
    let ds = generate_dataset(&sc, &TemplateSet::shipped(), &opts(120, 5)).unwrap();
    let transcript = ds
        .pairs
        .iter()
        .map(|p| format!("Reasoning omitted.\nFINAL: {}", final_text(p.meta.task, &p.meta.truth)))
        .collect();
    let scripted = MockScripted::new(transcript);
    let prompts = PromptSet::default();
    let o = EvalOptions {
        pipeline: Pipeline::Osp(4),
        ..EvalOptions::default()
    };
    let recs = run_eval(&ds.pairs, &by_id(&sc), &scripted, &prompts, None, &o).unwrap();
    let bad: Vec<_> = recs.iter().filter(|r| !r.numeric_correct).take(3).collect();
    assert!(bad.is_empty(), "{bad:#?}");
    let report = compute_metrics(
        &recs,
        ReportConfig {
            model: "scripted".into(),
            pipeline: Pipeline::Osp(4),
            prefix_on: true,
            rule_on: true,
        },
    )
    .unwrap();
    assert_eq!(report.a_c, None);
    assert!(report.rows.iter().all(|r| r.a_c.is_none()));
    assert!(report.existence_breakdown.is_none());
}

#[test]
fn unreachable_backend_fails_fast_with_partial_records() {
    let sc = scenes(13);
    let ds = generate_dataset(&sc, &TemplateSet::shipped(), &opts(40, 6)).unwrap();
    let dead = RemoteBackend::new("http://127.0.0.1:9/v1/chat/completions", "m", 2_000, None);
    let prompts = PromptSet::default();
    let o = EvalOptions {
        concurrency: 2,
        ..EvalOptions::default()
    };
    match run_eval(&ds.pairs, &by_id(&sc), &dead, &prompts, None, &o) {
        Err(EvalError::Fatal { records, .. }) => {
            assert!(!records.is_empty() && records.len() < 40);
            assert!(records.iter().all(|r| r.failed_stage.is_some()));
        }
        other => panic!("expected fatal error, got {other:?}"),
    }
}

#[test]
fn missing_scene_is_reported() {
    let sc = scenes(15);
    let ds = generate_dataset(&sc, &TemplateSet::shipped(), &opts(5, 6)).unwrap();
    let oracle = MockOracle::new(&ds.pairs, vec![]);
    let err = run_eval(&ds.pairs, &HashMap::new(), &oracle, &PromptSet::default(), None, &EvalOptions::default());
    assert!(matches!(err, Err(EvalError::MissingScene(_))));
}

#[test]
fn backend_config_builds_mocks() {
    let cfg = BackendConfig::from_json(r#"{"kind":"mock_noisy","error_rate":0.5,"seed":1}"#).unwrap();
    let b = cfg.build(&[], &[]).unwrap();
    assert_eq!(b.model_id(), "mock_noisy(p=0.5)");
    assert!(BackendConfig::from_json(r#"{"kind":"mock_noisy","error_rate":2,"seed":1}"#)
        .unwrap()
        .build(&[], &[])
        .is_err());
    assert!(BackendConfig::from_json(r#"{"kind":"nope"}"#).is_err());
}
