//! Shared fixtures and independent oracles for the integration suites.
#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::Arc;

use axum::{routing::post, Json, Router};
use dynmap_core::bus::{LinguisticScene, RoadSummary};
use dynmap_core::llm::KeywordInterpreter;
use dynmap_core::perception::ObjectInfo;
use dynmap_core::pipeline::{render_stream, run_scenes, PipelineOptions};
use dynmap_core::road::RoadNetwork;
use dynmap_core::scene_graph::{LaneRelation, Relation, SpatialRelation};
use dynmap_core::toolbox::{NumericResult, QueryParams, Reading, TaskId};
use dynmap_core::traffic::SimConfig;
use dynmap_core::vocab::{Color, Signal, VehicleType};
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::{json, Value};

pub fn obj(id: &str, x: f64, y: f64, h: f64, rd: &str, lx: usize) -> ObjectInfo {
    ObjectInfo {
        id: id.into(),
        ts: 0.0,
        x,
        y,
        s: 0.0,
        lat: 0.0,
        v: 10.0,
        a: 0.0,
        h,
        le: 4.5,
        wi: 1.8,
        he: 1.5,
        ty: VehicleType::Car,
        co: Color::White,
        ln: format!("{rd}_{lx}"),
        lx,
        rd: rd.into(),
        sg: Signal::None,
        ds: "RSU1".into(),
    }
}

/// Random scene with `n` objects in a `box_m` square; the first `avs`
/// objects are AVs.
pub fn random_scene(rng: &mut impl Rng, n: usize, avs: usize, box_m: f64) -> LinguisticScene {
    let roads = ["R1", "R2", "R3"];
    let objects = (0..n)
        .map(|i| {
            let id = if i < avs { format!("AV{:03}", i + 1) } else { format!("v{i:03}") };
            let rd = *roads.choose(rng).unwrap();
            let mut o = obj(
                &id,
                rng.gen_range(-box_m / 2.0..box_m / 2.0),
                rng.gen_range(-box_m / 2.0..box_m / 2.0),
                rng.gen_range(0.0..360.0),
                rd,
                rng.gen_range(0..3),
            );
            o.v = rng.gen_range(0.0..30.0);
            o.a = rng.gen_range(-4.0..2.0);
            o.le = rng.gen_range(2.0..12.0);
            o.ty = *VehicleType::ALL.choose(rng).unwrap();
            o.co = *Color::ALL.choose(rng).unwrap();
            o.sg = *Signal::ALL.choose(rng).unwrap();
            o
        })
        .collect();
    LinguisticScene {
        scene_id: 1,
        ts: 0.0,
        objects,
        roads: roads
            .iter()
            .map(|r| RoadSummary {
                id: r.to_string(),
                lanes: (0..3).map(|i| format!("{r}_{i}")).collect(),
            })
            .collect(),
    }
}

pub fn random_params(rng: &mut impl Rng) -> QueryParams {
    let relation = match rng.gen_range(0..9) {
        0 => Relation::FRONT,
        1 => Relation::REAR,
        2 => Relation::LEFT,
        3 => Relation::RIGHT,
        4 => Relation::LEFT_LANE,
        5 => Relation::RIGHT_LANE,
        6 => Relation::SAME_LANE,
        7 => Relation::Surrounding,
        _ => Relation::Road(["R1", "R2", "R3"].choose(rng).unwrap().to_string()),
    };
    QueryParams {
        vtype: rng.gen_bool(0.5).then(|| *VehicleType::ALL.choose(rng).unwrap()),
        color: rng.gen_bool(0.5).then(|| *Color::ALL.choose(rng).unwrap()),
        relation,
    }
}

/// Body-frame quadrant of `o` seen from `e`: project the offset on the ego's
/// forward and left axes and pick the dominant one. `None` on a diagonal.
pub fn quadrant_oracle(e: &ObjectInfo, o: &ObjectInfo) -> Option<SpatialRelation> {
    let (dx, dy) = (o.x - e.x, o.y - e.y);
    if dx == 0.0 && dy == 0.0 {
        return Some(SpatialRelation::Front);
    }
    let h = e.h.to_radians();
    let fwd = dx * h.sin() + dy * h.cos();
    let left = -(dx * h.cos() - dy * h.sin());
    let scale = fwd.abs().max(left.abs());
    if (fwd.abs() - left.abs()).abs() <= 1e-9 * scale {
        return None;
    }
    Some(if fwd.abs() > left.abs() {
        if fwd > 0.0 {
            SpatialRelation::Front
        } else {
            SpatialRelation::Rear
        }
    } else if left > 0.0 {
        SpatialRelation::Left
    } else {
        SpatialRelation::Right
    })
}

/// Brute-force query: filter, then sort by ego distance and id.
/// `None` when any spatial decision lands on a diagonal.
pub fn brute_force(task: TaskId, p: &QueryParams, ls: &LinguisticScene, ego_id: &str) -> Option<NumericResult> {
    let ego = ls.objects.iter().find(|o| o.id == ego_id);
    let mut hits: Vec<(f64, &ObjectInfo)> = Vec::new();
    for o in &ls.objects {
        if o.id == ego_id || p.vtype.is_some_and(|t| t != o.ty) || p.color.is_some_and(|c| c != o.co) {
            continue;
        }
        let d = ego.map_or(0.0, |e| ((o.x - e.x).powi(2) + (o.y - e.y).powi(2)).sqrt());
        let keep = match &p.relation {
            Relation::Road(r) => &o.rd == r,
            rel => {
                let e = ego?;
                if d > 100.0 {
                    false
                } else {
                    match rel {
                        Relation::Surrounding => true,
                        Relation::Spatial(s) => quadrant_oracle(e, o)? == *s,
                        Relation::Lane(l) => {
                            o.rd == e.rd
                                && match l {
                                    LaneRelation::SameLane => o.lx == e.lx,
                                    LaneRelation::LeftLane => e.lx == o.lx + 1,
                                    LaneRelation::RightLane => o.lx == e.lx + 1,
                                }
                        }
                        Relation::Road(_) => unreachable!(),
                    }
                }
            }
        };
        if keep {
            hits.push((d, o));
        }
    }
    hits.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.id.cmp(&b.1.id)));
    let values = match task {
        TaskId::Count => vec![Reading::Scalar(hits.len() as f64)],
        TaskId::Existence => vec![Reading::Scalar((!hits.is_empty()) as u8 as f64)],
        _ => hits
            .iter()
            .map(|(d, o)| match task {
                TaskId::Velocity => Reading::Scalar(o.v),
                TaskId::Acceleration => Reading::Scalar(o.a),
                TaskId::Heading => Reading::Scalar(o.h),
                TaskId::Color => Reading::Scalar(o.co.code() as f64),
                TaskId::Classification => Reading::Scalar(o.ty.code() as f64),
                TaskId::Size => Reading::Triple([o.le, o.wi, o.he]),
                TaskId::Status => Reading::Scalar(o.sg.code() as f64),
                TaskId::Distance => Reading::Scalar(*d),
                _ => unreachable!(),
            })
            .collect(),
    };
    Some(NumericResult {
        values,
        matched_ids: hits.iter().map(|(_, o)| o.id.clone()).collect(),
    })
}

pub fn sim(seed: u64, duration: f64) -> SimConfig {
    SimConfig {
        seed,
        duration,
        ..SimConfig::default()
    }
}

/// Scene stream text for a seeded run on the bundled crossing.
pub fn scene_stream(cfg: SimConfig) -> String {
    let net = Arc::new(RoadNetwork::net_cross());
    render_stream(&run_scenes(cfg, net, &PipelineOptions::default()).unwrap())
}

pub fn by_id(scenes: &[LinguisticScene]) -> HashMap<u64, LinguisticScene> {
    scenes.iter().map(|s| (s.scene_id, s.clone())).collect()
}

fn question_of(prompt: &str) -> &str {
    prompt
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix("Question: "))
        .unwrap_or("")
}

/// Reply a chat-completion server built on keyword rules would give.
pub fn fake_reply(prompt: &str, interp: &KeywordInterpreter) -> String {
    let q = question_of(prompt);
    if prompt.contains(r#"{"task": <integer 1-10>}"#) {
        match interp.classify(q) {
            Some(t) => json!({ "task": t.number() }).to_string(),
            None => "I cannot tell.".into(),
        }
    } else if prompt.contains("keys vtype, color, relation and road") {
        serde_json::to_string(&interp.extract(q)).unwrap()
    } else if prompt.contains("FINAL:") {
        "Not enough information.\nFINAL: no".into()
    } else {
        json!({"answer": "See the numeric result.", "advice": "Drive carefully."}).to_string()
    }
}

/// Serves the chat-completion route on an ephemeral port; returns the URL.
pub fn spawn_fake_llm(aliases: Vec<(String, String)>) -> String {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let interp = Arc::new(KeywordInterpreter::new(aliases));
            let app = Router::new().route(
                "/v1/chat/completions",
                post(move |Json(body): Json<Value>| {
                    let interp = Arc::clone(&interp);
                    async move {
                        let prompt = body["messages"][0]["content"].as_str().unwrap_or("").to_string();
                        let content = fake_reply(&prompt, &interp);
                        Json(json!({"choices": [{"message": {"role": "assistant", "content": content}}]}))
                    }
                }),
            );
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    let addr = rx.recv().unwrap();
    format!("http://{addr}/v1/chat/completions")
}
