//! Question templates, QA-pair instantiation over attribute-entity-relation
//! graphs, and the dataset writer.
//!
//! Template text uses the placeholders `<type>` (or the plural `<types>`),
//! `<color>`, `<relation>` and `<road>`. Ground truth is computed from the
//! graph and the scene directly, not through the query toolbox, so the
//! toolbox can be checked against it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::bus::LinguisticScene;
use crate::perception::ObjectInfo;
use crate::scene_graph::{
    attributes_of, build_aer, build_graph, AERGraph, AttrValue, LaneRelation, MaskSpec, Relation,
    SpatialRelation,
};
use crate::toolbox::{NumericResult, QueryParams, Reading, TaskId};
use crate::vocab::{Color, Signal, VehicleType};

pub const RADIUS_PREFIX: &str = "within an 100-meter radius, ";
pub const RETRY_BUDGET: usize = 50;
pub const DEFAULT_TEMPLATES: &str = include_str!("../templates/default.jsonl");

#[derive(Debug, Error)]
pub enum QaError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("template {id}: {msg}")]
    Template { id: String, msg: String },
    #[error("task {task} uncovered ({hop})")]
    Uncovered { task: u8, hop: Hop },
    #[error("no entity satisfies template {0}")]
    NoSatisfyingEntity(String),
    #[error("no scene contains an autonomous vehicle")]
    NoEgo,
    #[error("n must be at least 1")]
    EmptyRequest,
    #[error("could not instantiate {} pairs after {RETRY_BUDGET} retries each; shortfall per task: {}", .total, fmt_shortfall(.per_task))]
    Shortfall {
        total: usize,
        per_task: BTreeMap<TaskId, usize>,
    },
}

fn fmt_shortfall(m: &BTreeMap<TaskId, usize>) -> String {
    m.iter()
        .map(|(t, n)| format!("{}={n}", t.number()))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hop {
    /// One-hop: referents found through relations to the ego.
    EgoCentric,
    /// Zero-hop: referents found by road membership.
    EgoAgnostic,
}

impl fmt::Display for Hop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Hop::EgoCentric => "ego_centric",
            Hop::EgoAgnostic => "ego_agnostic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Type,
    Color,
    Relation,
    Road,
}

impl Slot {
    fn from_placeholder(name: &str) -> Option<Slot> {
        Some(match name {
            "type" | "types" => Slot::Type,
            "color" => Slot::Color,
            "relation" => Slot::Relation,
            "road" => Slot::Road,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionTemplate {
    pub id: String,
    pub task: TaskId,
    pub hop: Hop,
    pub text: String,
    pub required_slots: BTreeSet<Slot>,
}

/// Placeholder names in order of appearance.
fn placeholders(text: &str) -> Result<Vec<&str>, String> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find(['<', '>']) {
        if rest.as_bytes()[open] == b'>' {
            return Err(format!("malformed placeholder: stray '>' in {text:?}"));
        }
        let after = &rest[open + 1..];
        let close = after
            .find(['<', '>'])
            .filter(|&i| after.as_bytes()[i] == b'>')
            .ok_or_else(|| format!("malformed placeholder: unclosed '<' in {text:?}"))?;
        let name = &after[..close];
        if Slot::from_placeholder(name).is_none() {
            return Err(format!("malformed placeholder <{name}>"));
        }
        out.push(name);
        rest = &after[close + 1..];
    }
    Ok(out)
}

impl QuestionTemplate {
    pub fn validate(&self) -> Result<(), QaError> {
        let err = |msg: String| QaError::Template {
            id: self.id.clone(),
            msg,
        };
        let names = placeholders(&self.text).map_err(err)?;
        let used: BTreeSet<Slot> = names.iter().filter_map(|n| Slot::from_placeholder(n)).collect();
        if used != self.required_slots {
            return Err(err(format!(
                "slot mismatch: text uses {used:?}, required_slots lists {:?}",
                self.required_slots
            )));
        }
        match self.hop {
            Hop::EgoCentric if !used.contains(&Slot::Relation) || used.contains(&Slot::Road) => {
                return Err(err("ego-centric templates need <relation> and no <road>".into()))
            }
            Hop::EgoAgnostic if !used.contains(&Slot::Road) || used.contains(&Slot::Relation) => {
                return Err(err("ego-agnostic templates need <road> and no <relation>".into()))
            }
            _ => {}
        }
        if self.task == TaskId::Color && used.contains(&Slot::Color) {
            return Err(err("a color question cannot name the color".into()));
        }
        if self.task == TaskId::Classification && used.contains(&Slot::Type) {
            return Err(err("a classification question cannot name the type".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    pub templates: Vec<QuestionTemplate>,
}

impl TemplateSet {
    pub fn parse(text: &str) -> Result<Self, QaError> {
        let mut templates = Vec::new();
        let mut ids = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let t: QuestionTemplate = serde_json::from_str(line).map_err(|e| QaError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            t.validate()?;
            if !ids.insert(t.id.clone()) {
                return Err(QaError::Template {
                    id: t.id,
                    msg: "duplicate id".into(),
                });
            }
            templates.push(t);
        }
        for hop in [Hop::EgoCentric, Hop::EgoAgnostic] {
            for task in TaskId::ALL {
                if !templates.iter().any(|t| t.task == task && t.hop == hop) {
                    return Err(QaError::Uncovered {
                        task: task.number(),
                        hop,
                    });
                }
            }
        }
        Ok(Self { templates })
    }

    pub fn shipped() -> Self {
        Self::parse(DEFAULT_TEMPLATES).expect("shipped templates are valid")
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

pub fn load_templates(path: impl AsRef<Path>) -> Result<TemplateSet, QaError> {
    TemplateSet::parse(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaMeta {
    pub scene_id: u64,
    pub ego_id: String,
    pub task: TaskId,
    pub hop: Hop,
    pub template_id: String,
    pub params: QueryParams,
    pub matched_ids: Vec<String>,
    pub truth: NumericResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAPair {
    pub question: String,
    pub answer: Value,
    pub meta: QaMeta,
}

pub fn with_prefix(question: &str) -> String {
    if question.starts_with(RADIUS_PREFIX) {
        question.to_string()
    } else {
        format!("{RADIUS_PREFIX}{question}")
    }
}

pub fn strip_prefix(question: &str) -> &str {
    question.strip_prefix(RADIUS_PREFIX).unwrap_or(question)
}

/// Locative phrase used for a relation inside a question.
pub fn relation_phrase(rel: &Relation) -> String {
    match rel {
        Relation::Spatial(SpatialRelation::Front) => "in front of me".into(),
        Relation::Spatial(SpatialRelation::Rear) => "behind me".into(),
        Relation::Spatial(SpatialRelation::Left) => "to my left".into(),
        Relation::Spatial(SpatialRelation::Right) => "to my right".into(),
        Relation::Lane(LaneRelation::LeftLane) => "on my left lane".into(),
        Relation::Lane(LaneRelation::RightLane) => "on my right lane".into(),
        Relation::Lane(LaneRelation::SameLane) => "in my lane".into(),
        Relation::Surrounding => "around me".into(),
        Relation::Road(r) => format!("on road {r}"),
    }
}

fn plural(t: VehicleType) -> &'static str {
    match t {
        VehicleType::Car => "cars",
        VehicleType::Truck => "trucks",
        VehicleType::Bus => "buses",
        VehicleType::Motorcycle => "motorcycles",
    }
}

fn render_text(t: &QuestionTemplate, p: &QueryParams) -> String {
    let mut out = t.text.clone();
    if let Some(ty) = p.vtype {
        out = out.replace("<types>", plural(ty)).replace("<type>", ty.as_str());
    }
    if let Some(co) = p.color {
        out = out.replace("<color>", co.as_str());
    }
    if let Some(road) = p.road() {
        out = out.replace("<road>", &format!("road {road}"));
    }
    out.replace("<relation>", &relation_phrase(&p.relation))
}

fn attr_reading(attrs: &BTreeMap<&'static str, AttrValue>, task: TaskId, distance: f64) -> Reading {
    let num = |k: &str| match &attrs[k] {
        AttrValue::Num(v) => *v,
        AttrValue::Int(v) => *v as f64,
        AttrValue::Text(t) => panic!("attribute {k} is text: {t}"),
    };
    let text = |k: &str| match &attrs[k] {
        AttrValue::Text(t) => t.clone(),
        other => panic!("attribute {k} is not text: {other}"),
    };
    match task {
        TaskId::Velocity => Reading::Scalar(num("v")),
        TaskId::Acceleration => Reading::Scalar(num("a")),
        TaskId::Heading => Reading::Scalar(num("h")),
        TaskId::Color => Reading::Scalar(text("co").parse::<Color>().unwrap().code() as f64),
        TaskId::Classification => {
            Reading::Scalar(text("ty").parse::<VehicleType>().unwrap().code() as f64)
        }
        TaskId::Size => Reading::Triple([num("le"), num("wi"), num("he")]),
        TaskId::Status => Reading::Scalar(text("sg").parse::<Signal>().unwrap().code() as f64),
        TaskId::Distance => Reading::Scalar(distance),
        TaskId::Count | TaskId::Existence => unreachable!(),
    }
}

/// Human-readable form of a reading for a task.
pub fn display_reading(task: TaskId, r: &Reading) -> Value {
    match (task, r) {
        (TaskId::Color, Reading::Scalar(c)) => json!(Color::from_code(*c as u8).map(|c| c.as_str())),
        (TaskId::Classification, Reading::Scalar(c)) => {
            json!(VehicleType::from_code(*c as u8).map(|c| c.as_str()))
        }
        (TaskId::Status, Reading::Scalar(c)) => json!(Signal::from_code(*c as u8).map(|c| c.as_str())),
        (TaskId::Count, Reading::Scalar(n)) => json!(*n as u64),
        (TaskId::Existence, Reading::Scalar(b)) => json!(*b != 0.0),
        (_, Reading::Scalar(v)) => json!(v),
        (_, Reading::Triple(t)) => json!(t),
    }
}

/// Display answer: a single value for one match, an array for several.
pub fn display_answer(task: TaskId, truth: &NumericResult) -> Value {
    let mut vals: Vec<Value> = truth.values.iter().map(|r| display_reading(task, r)).collect();
    match vals.len() {
        0 => json!("no matching vehicle"),
        1 => vals.pop().unwrap(),
        _ => Value::Array(vals),
    }
}

struct Referent<'a> {
    id: &'a str,
    attrs: BTreeMap<&'static str, AttrValue>,
    distance: f64,
}

fn text_eq(attrs: &BTreeMap<&'static str, AttrValue>, key: &str, want: Option<&str>) -> bool {
    want.is_none_or(|w| attrs[key] == AttrValue::Text(w.to_string()))
}

fn referents<'a>(aer: &'a AERGraph, ls: &'a LinguisticScene, p: &QueryParams) -> Vec<Referent<'a>> {
    let ty = p.vtype.map(|t| t.as_str());
    let co = p.color.map(|c| c.as_str());
    match &p.relation {
        Relation::Road(road) => {
            // Zero-hop: read straight from the scene, no distance limit.
            let ego = &aer.base.ego;
            let mut out: Vec<Referent> = ls
                .objects
                .iter()
                .filter(|o| o.id != ego.id && &o.rd == road)
                .map(|o| Referent {
                    id: &o.id,
                    attrs: attributes_of(o),
                    distance: (o.x - ego.x).hypot(o.y - ego.y),
                })
                .filter(|r| text_eq(&r.attrs, "ty", ty) && text_eq(&r.attrs, "co", co))
                .collect();
            out.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.id.cmp(b.id)));
            out
        }
        rel => aer
            .base
            .edges
            .iter()
            .filter(|e| e.has_relation(rel))
            .map(|e| Referent {
                id: &e.object.id,
                attrs: aer.attributes[&e.object.id].clone(),
                distance: e.distance,
            })
            .filter(|r| text_eq(&r.attrs, "ty", ty) && text_eq(&r.attrs, "co", co))
            .collect(),
    }
}

fn anchor_params(t: &QuestionTemplate, anchor: &ObjectInfo, edge_rels: &[Relation], rng: &mut impl Rng) -> QueryParams {
    let slots = &t.required_slots;
    let relation = match t.hop {
        Hop::EgoAgnostic => Relation::Road(anchor.rd.clone()),
        Hop::EgoCentric => {
            let mut options: Vec<Relation> = edge_rels
                .iter()
                .filter(|r| !r.is_ego_agnostic())
                .cloned()
                .collect();
            options.push(Relation::Surrounding);
            options.choose(rng).unwrap().clone()
        }
    };
    QueryParams {
        vtype: slots.contains(&Slot::Type).then_some(anchor.ty),
        color: slots.contains(&Slot::Color).then_some(anchor.co),
        relation,
    }
}

fn random_params(t: &QuestionTemplate, ls: &LinguisticScene, rng: &mut impl Rng) -> QueryParams {
    let slots = &t.required_slots;
    let relation = match t.hop {
        Hop::EgoAgnostic => {
            let mut roads: BTreeSet<&str> = ls.roads.iter().map(|r| r.id.as_str()).collect();
            if roads.is_empty() {
                roads = ls.objects.iter().map(|o| o.rd.as_str()).collect();
            }
            let roads: Vec<&str> = roads.into_iter().collect();
            Relation::Road(roads.choose(rng).expect("scene holds the ego").to_string())
        }
        Hop::EgoCentric => [
            Relation::FRONT,
            Relation::REAR,
            Relation::LEFT,
            Relation::RIGHT,
            Relation::LEFT_LANE,
            Relation::RIGHT_LANE,
            Relation::SAME_LANE,
            Relation::Surrounding,
        ]
        .choose(rng)
        .unwrap()
        .clone(),
    };
    QueryParams {
        vtype: slots
            .contains(&Slot::Type)
            .then(|| *VehicleType::ALL.choose(rng).unwrap()),
        color: slots.contains(&Slot::Color).then(|| *Color::ALL.choose(rng).unwrap()),
        relation,
    }
}

/// Fills `t` from the graph's masked entity and computes the ground truth.
///
/// Existence templates come out negative about half the time: random
/// constraints are drawn until one selects nothing.
pub fn instantiate(
    t: &QuestionTemplate,
    aer: &AERGraph,
    ls: &LinguisticScene,
    rng: &mut impl Rng,
) -> Result<QAPair, QaError> {
    let no_entity = || QaError::NoSatisfyingEntity(t.id.clone());
    let edge = aer.masked_edge().ok_or_else(no_entity)?;
    let mut params = anchor_params(t, &edge.object, &edge.relations(), rng);
    if t.task == TaskId::Existence && rng.gen_bool(0.5) {
        for _ in 0..20 {
            let candidate = random_params(t, ls, rng);
            if referents(aer, ls, &candidate).is_empty() {
                params = candidate;
                break;
            }
        }
    }
    let refs = referents(aer, ls, &params);
    if refs.is_empty() && t.task != TaskId::Existence {
        return Err(no_entity());
    }
    let matched_ids: Vec<String> = refs.iter().map(|r| r.id.to_string()).collect();
    let values = match t.task {
        TaskId::Count => vec![Reading::Scalar(refs.len() as f64)],
        TaskId::Existence => vec![Reading::Scalar(if refs.is_empty() { 0.0 } else { 1.0 })],
        task => refs.iter().map(|r| attr_reading(&r.attrs, task, r.distance)).collect(),
    };
    let truth = NumericResult {
        values,
        matched_ids: matched_ids.clone(),
    };
    Ok(QAPair {
        question: render_text(t, &params),
        answer: display_answer(t.task, &truth),
        meta: QaMeta {
            scene_id: ls.scene_id,
            ego_id: aer.base.ego.id.clone(),
            task: t.task,
            hop: t.hop,
            template_id: t.id.clone(),
            params,
            matched_ids,
            truth,
        },
    })
}

#[derive(Debug, Clone)]
pub struct GenOptions {
    pub n: usize,
    pub seed: u64,
    pub prefix_on: bool,
}

/// Per-task pair counts split by hop class.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TaskHistogram {
    pub counts: BTreeMap<TaskId, [usize; 2]>,
}

impl TaskHistogram {
    pub fn from_pairs(pairs: &[QAPair]) -> Self {
        let mut counts: BTreeMap<TaskId, [usize; 2]> = TaskId::ALL.iter().map(|t| (*t, [0, 0])).collect();
        for p in pairs {
            let col = match p.meta.hop {
                Hop::EgoCentric => 0,
                Hop::EgoAgnostic => 1,
            };
            counts.get_mut(&p.meta.task).unwrap()[col] += 1;
        }
        Self { counts }
    }

    pub fn total(&self, task: TaskId) -> usize {
        self.counts.get(&task).map_or(0, |c| c[0] + c[1])
    }

    pub fn render(&self) -> String {
        let mut out = format!("{:<16}{:>12}{:>14}{:>8}\n", "query task", "ego-centric", "ego-agnostic", "total");
        let mut sums = [0usize; 2];
        for (task, c) in &self.counts {
            sums[0] += c[0];
            sums[1] += c[1];
            writeln!(out, "{:<16}{:>12}{:>14}{:>8}", task.name(), c[0], c[1], c[0] + c[1]).unwrap();
        }
        writeln!(out, "{:<16}{:>12}{:>14}{:>8}", "total", sums[0], sums[1], sums[0] + sums[1]).unwrap();
        out
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub pairs: Vec<QAPair>,
    pub histogram: TaskHistogram,
}

fn pair_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn generate_one(
    i: usize,
    scenes: &[&LinguisticScene],
    templates: &TemplateSet,
    opts: &GenOptions,
) -> Result<QAPair, TaskId> {
    let mut rng = pair_rng(opts.seed, i);
    let t = templates.templates.choose(&mut rng).unwrap();
    let attribute = t.task.attribute().unwrap_or("id");
    for _ in 0..RETRY_BUDGET {
        let ls = *scenes.choose(&mut rng).unwrap();
        let avs = ls.av_ids();
        let ego = *avs.choose(&mut rng).unwrap();
        let Ok(g) = build_graph(ls, ego) else { continue };
        let Some(anchor) = g.edges.choose(&mut rng) else { continue };
        let mask = MaskSpec::Fixed {
            entity: anchor.object.id.clone(),
            attribute: attribute.into(),
        };
        let Ok(aer) = build_aer(&g, mask) else { continue };
        if let Ok(mut pair) = instantiate(t, &aer, ls, &mut rng) {
            if opts.prefix_on {
                pair.question = with_prefix(&pair.question);
            }
            return Ok(pair);
        }
    }
    Err(t.task)
}

/// Samples `n` pairs uniformly over scenes and templates. Pair `i` draws
/// from its own random stream, so output is independent of thread count.
pub fn generate_dataset(
    scenes: &[LinguisticScene],
    templates: &TemplateSet,
    opts: &GenOptions,
) -> Result<Dataset, QaError> {
    if opts.n == 0 {
        return Err(QaError::EmptyRequest);
    }
    let usable: Vec<&LinguisticScene> = scenes.iter().filter(|s| !s.av_ids().is_empty()).collect();
    if usable.is_empty() {
        return Err(QaError::NoEgo);
    }
    let results: Vec<Result<QAPair, TaskId>> = (0..opts.n)
        .into_par_iter()
        .map(|i| generate_one(i, &usable, templates, opts))
        .collect();
    let mut pairs = Vec::with_capacity(opts.n);
    let mut shortfall: BTreeMap<TaskId, usize> = BTreeMap::new();
    for r in results {
        match r {
            Ok(p) => pairs.push(p),
            Err(task) => *shortfall.entry(task).or_default() += 1,
        }
    }
    if !shortfall.is_empty() {
        return Err(QaError::Shortfall {
            total: shortfall.values().sum(),
            per_task: shortfall,
        });
    }
    let histogram = TaskHistogram::from_pairs(&pairs);
    Ok(Dataset { pairs, histogram })
}

pub fn write_dataset(pairs: &[QAPair]) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(p).expect("pair serializes"));
        out.push('\n');
    }
    out
}

pub fn read_dataset(text: &str) -> Result<Vec<QAPair>, QaError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| QaError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}
