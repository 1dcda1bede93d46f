//! Grading, accuracy metrics, task bias and evaluation runs.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::LinguisticScene;
use crate::cop::{Cop, CopError, PromptSet, StageTimings};
use crate::llm::{BackendError, LlmBackend, Stage};
use crate::qa::{strip_prefix, with_prefix, Hop, QAPair};
use crate::road::RoadNetwork;
use crate::toolbox::{NumericResult, Reading, TaskId};
use crate::vocab::{Color, Signal, VehicleType};

/// Absolute tolerance for float components.
pub const FLOAT_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records to evaluate")]
    Empty,
    #[error("scene {0} referenced by the dataset is missing")]
    MissingScene(u64),
    #[error("unknown pipeline {0:?} (expected cop or osp1..osp4)")]
    UnknownPipeline(String),
    #[error("backend failure after {} records: {error}", records.len())]
    Fatal {
        error: BackendError,
        /// Records graded before the failure, in dataset order.
        records: Vec<GradeRecord>,
    },
    #[error("thread pool: {0}")]
    Pool(String),
}

/// True iff both results have the same number of readings and every
/// component agrees within `FLOAT_TOL`.
pub fn grade_numeric(pred: &NumericResult, truth: &NumericResult) -> bool {
    pred.values.len() == truth.values.len()
        && pred.values.iter().zip(&truth.values).all(|(p, t)| {
            let (p, t) = (p.components(), t.components());
            p.len() == t.len() && p.iter().zip(t).all(|(a, b)| (a - b).abs() <= FLOAT_TOL)
        })
}

const UNITS: [&str; 11] = [
    "m/s^2", "m/s²", "m/s2", "m/s", "km/h", "meters", "metres", "degrees", "deg", "°", "meter",
];

const EMPTY_ANSWERS: [&str; 5] = ["no matching vehicle", "no matching vehicles", "no vehicle", "n/a", "none"];

fn numbers(s: &str) -> Vec<f64> {
    s.split(|c: char| !(c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e')))
        .filter_map(|tok| tok.trim_matches(|c| c == '.' || c == 'e').parse::<f64>().ok())
        .collect()
}

fn items(s: &str) -> Vec<&str> {
    s.split([',', ';'])
        .flat_map(|p| p.split(" and "))
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .collect()
}

fn enum_code(task: TaskId, word: &str) -> Option<f64> {
    let w = word.trim_matches(|c: char| !c.is_alphanumeric() && c != ' ').trim();
    let code = match task {
        TaskId::Color => Color::from_str(w).ok()?.code(),
        TaskId::Classification => VehicleType::from_str(w)
            .or_else(|_| VehicleType::from_str(w.strip_suffix("es").unwrap_or(w)))
            .or_else(|_| VehicleType::from_str(w.strip_suffix('s').unwrap_or(w)))
            .ok()?
            .code(),
        TaskId::Status => match w {
            "no signal" | "off" => Signal::None.code(),
            "braking" => Signal::Brake.code(),
            _ => Signal::from_str(w).ok()?.code(),
        },
        _ => return None,
    };
    Some(code as f64)
}

/// Normalizes the value of the last `FINAL:` line of a one-shot reply into a
/// numeric result for `task`. `None` means the reply cannot be graded.
pub fn parse_final(reply: &str, task: TaskId) -> Option<NumericResult> {
    let line = reply.lines().rev().find(|l| l.to_lowercase().contains("final:"))?;
    let lower = line.to_lowercase();
    let idx = lower.find("final:")? + "final:".len();
    let mut v = lower[idx..]
        .trim()
        .trim_matches(|c| matches!(c, '"' | '\'' | '`' | '*' | '[' | ']' | '.'))
        .trim()
        .to_string();
    for u in UNITS {
        v = v.replace(u, " ");
    }
    let v = v.trim();
    let scalar = |x: f64| NumericResult {
        values: vec![Reading::Scalar(x)],
        matched_ids: vec![],
    };
    let empty = || NumericResult::default();
    match task {
        TaskId::Existence => match v {
            "yes" | "true" | "1" => Some(scalar(1.0)),
            "no" | "false" | "0" | "none" | "no matching vehicle" => Some(scalar(0.0)),
            _ => None,
        },
        TaskId::Count => match v {
            "none" | "no matching vehicle" | "zero" => Some(scalar(0.0)),
            _ => numbers(v).first().map(|n| scalar(*n)),
        },
        TaskId::Status if v == "none" => Some(scalar(Signal::None.code() as f64)),
        _ if EMPTY_ANSWERS.contains(&v) || v.is_empty() => Some(empty()),
        TaskId::Color | TaskId::Classification | TaskId::Status => {
            let values = items(v)
                .into_iter()
                .map(|w| enum_code(task, w).map(Reading::Scalar))
                .collect::<Option<Vec<_>>>()?;
            Some(NumericResult { values, matched_ids: vec![] })
        }
        TaskId::Size => {
            let n = numbers(v);
            if n.is_empty() || n.len() % 3 != 0 {
                return None;
            }
            let values = n.chunks(3).map(|c| Reading::Triple([c[0], c[1], c[2]])).collect();
            Some(NumericResult { values, matched_ids: vec![] })
        }
        _ => {
            let values = items(v)
                .into_iter()
                .map(|it| numbers(it).first().copied().map(Reading::Scalar))
                .collect::<Option<Vec<_>>>()?;
            Some(NumericResult { values, matched_ids: vec![] })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pipeline {
    Cop,
    /// One-shot prompting, variants 1..=4.
    Osp(u8),
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pipeline::Cop => f.write_str("cop"),
            Pipeline::Osp(v) => write!(f, "osp{v}"),
        }
    }
}

impl FromStr for Pipeline {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        if s == "cop" {
            return Ok(Pipeline::Cop);
        }
        match s.strip_prefix("osp").map(str::parse::<u8>) {
            Some(Ok(v)) if (1..=4).contains(&v) => Ok(Pipeline::Osp(v)),
            _ => Err(EvalError::UnknownPipeline(s)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeRecord {
    pub index: usize,
    /// Question as posed to the pipeline (after the prefix toggle).
    pub question: String,
    pub scene_id: u64,
    pub ego_id: String,
    pub task: TaskId,
    pub hop: Hop,
    pub truth: NumericResult,
    pub predicted_task: Option<TaskId>,
    pub predicted_numeric: Option<NumericResult>,
    pub task_correct: bool,
    pub numeric_correct: bool,
    pub failed_stage: Option<Stage>,
    pub error: Option<String>,
    /// Raw one-shot reply.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    pub timings: StageTimings,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub pipeline: Pipeline,
    /// Add (true) or strip (false) the radius prefix on every question.
    pub prefix_on: bool,
    /// Run the enhancement stage in CoP runs.
    pub enhance: bool,
    /// Concurrent requests; ignored for serial backends.
    pub concurrency: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            pipeline: Pipeline::Cop,
            prefix_on: true,
            enhance: true,
            concurrency: 4,
        }
    }
}

impl Serialize for Pipeline {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Pipeline {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn fatal_of(e: &CopError) -> Option<BackendError> {
    match e {
        CopError::Backend(b) if b.is_fatal() => Some(b.clone()),
        _ => None,
    }
}

fn grade_one(
    index: usize,
    pair: &QAPair,
    ls: &LinguisticScene,
    cop: &Cop,
    opts: &EvalOptions,
) -> (GradeRecord, Option<BackendError>) {
    let question = if opts.prefix_on {
        with_prefix(&pair.question)
    } else {
        strip_prefix(&pair.question).to_string()
    };
    let meta = &pair.meta;
    let mut rec = GradeRecord {
        index,
        question,
        scene_id: meta.scene_id,
        ego_id: meta.ego_id.clone(),
        task: meta.task,
        hop: meta.hop,
        truth: meta.truth.clone(),
        predicted_task: None,
        predicted_numeric: None,
        task_correct: false,
        numeric_correct: false,
        failed_stage: None,
        error: None,
        reply: None,
        timings: StageTimings::default(),
        total_ms: 0.0,
    };
    let key = Some(index as u64);
    let t0 = Instant::now();
    let mut fatal = None;
    match opts.pipeline {
        Pipeline::Cop => match cop.answer(&rec.question, ls, &meta.ego_id, key) {
            Ok(r) => {
                rec.predicted_task = Some(r.task);
                rec.predicted_numeric = Some(r.numeric);
                rec.timings = r.timings;
            }
            Err(f) => {
                fatal = fatal_of(&f.error);
                rec.predicted_task = f.task;
                // A failure after the toolbox still leaves a gradable result.
                rec.predicted_numeric = f.numeric.clone();
                rec.failed_stage = Some(f.stage);
                rec.error = Some(f.error.to_string());
                rec.timings = f.timings;
            }
        },
        Pipeline::Osp(v) => match cop.osp_answer(v, &rec.question, ls, &meta.ego_id, key) {
            Ok(reply) => {
                rec.predicted_numeric = parse_final(&reply, meta.task);
                rec.reply = Some(reply);
            }
            Err(e) => {
                fatal = fatal_of(&e);
                rec.failed_stage = Some(Stage::Osp);
                rec.error = Some(e.to_string());
            }
        },
    }
    rec.total_ms = t0.elapsed().as_secs_f64() * 1000.0;
    rec.task_correct = rec.predicted_task == Some(meta.task);
    rec.numeric_correct = rec
        .predicted_numeric
        .as_ref()
        .is_some_and(|p| grade_numeric(p, &meta.truth));
    (rec, fatal)
}

/// Answers and grades every pair. Results are in dataset order regardless of
/// concurrency. A fatal backend error stops the run; records graded so far
/// come back inside `EvalError::Fatal`.
pub fn run_eval(
    pairs: &[QAPair],
    scenes: &HashMap<u64, LinguisticScene>,
    backend: &dyn LlmBackend,
    prompts: &PromptSet,
    network: Option<&RoadNetwork>,
    opts: &EvalOptions,
) -> Result<Vec<GradeRecord>, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(p) = pairs.iter().find(|p| !scenes.contains_key(&p.meta.scene_id)) {
        return Err(EvalError::MissingScene(p.meta.scene_id));
    }
    let mut cop = Cop::new(backend, prompts);
    cop.network = network;
    cop.enhance = opts.enhance;
    let serial = backend.serial() || opts.concurrency <= 1;
    let threads = opts.concurrency.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(if serial { 1 } else { threads })
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    let chunk = if serial { 1 } else { threads * 4 };
    let mut records = Vec::with_capacity(pairs.len());
    let indexed: Vec<(usize, &QAPair)> = pairs.iter().enumerate().collect();
    for batch in indexed.chunks(chunk) {
        let grade = |(i, p): &(usize, &QAPair)| grade_one(*i, p, &scenes[&p.meta.scene_id], &cop, opts);
        let out: Vec<_> = if serial {
            batch.iter().map(grade).collect()
        } else {
            pool.install(|| batch.par_iter().map(grade).collect())
        };
        let mut fatal = None;
        for (rec, f) in out {
            if fatal.is_none() {
                fatal = f;
            }
            records.push(rec);
        }
        if let Some(error) = fatal {
            log::error!("stopping evaluation: {error}");
            return Err(EvalError::Fatal { error, records });
        }
    }
    Ok(records)
}

pub fn write_records(records: &[GradeRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Per-model task bias: the sum over other tasks of sign(A_i − A_j).
/// Tasks without data (`None`) score 0 and are skipped as opponents.
pub fn pairwise_bias(a_q: &[Option<f64>]) -> Vec<i32> {
    a_q.iter()
        .map(|ai| match ai {
            None => 0,
            Some(ai) => a_q
                .iter()
                .flatten()
                .map(|aj| match ai.partial_cmp(aj) {
                    Some(std::cmp::Ordering::Greater) => 1,
                    Some(std::cmp::Ordering::Less) => -1,
                    _ => 0,
                })
                .sum(),
        })
        .collect()
}

/// Per-model extremal indicator: +1 for tasks at the maximum A_Q, −1 at the
/// minimum, 0 otherwise (ties share the mark; all-equal scores give 0).
pub fn extremal_bias(a_q: &[Option<f64>]) -> Vec<i32> {
    let present: Vec<f64> = a_q.iter().flatten().copied().collect();
    let max = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = present.iter().copied().fold(f64::INFINITY, f64::min);
    a_q.iter()
        .map(|a| match a {
            Some(_) if present.len() < 2 || max == min => 0,
            Some(a) if *a == max => 1,
            Some(a) if *a == min => -1,
            _ => 0,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasRule {
    Pairwise,
    Extremal,
}

/// Sums per-model bias over models, one `A_Q` column per model.
pub fn aggregate_bias(models: &[Vec<Option<f64>>], rule: BiasRule) -> Vec<i32> {
    let n = models.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = vec![0; n];
    for m in models {
        let b = match rule {
            BiasRule::Pairwise => pairwise_bias(m),
            BiasRule::Extremal => extremal_bias(m),
        };
        for (o, v) in out.iter_mut().zip(b) {
            *o += v;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task: TaskId,
    pub name: String,
    /// N_q: questions of this task.
    pub n_q: usize,
    /// N_c: questions with a correct numeric result.
    pub n_c: usize,
    pub n_task_correct: usize,
    pub a_c: Option<f64>,
    pub a_q: Option<f64>,
    /// Pairwise bias of this model.
    pub bias: i32,
    /// Extremal indicator of this model.
    pub extremal: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub n: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

impl LatencyStats {
    pub fn from_samples(samples: &mut [f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        samples.sort_by(f64::total_cmp);
        let n = samples.len();
        let rank = |p: f64| samples[((p * n as f64).ceil() as usize).clamp(1, n) - 1];
        Some(Self {
            n,
            mean_ms: samples.iter().sum::<f64>() / n as f64,
            p50_ms: rank(0.50),
            p95_ms: rank(0.95),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownCell {
    pub label: String,
    pub percent: f64,
}

/// How existence questions were classified: one cell per task plus "none"
/// (classification failed), in task order with existence last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExistenceBreakdown {
    pub n: usize,
    pub cells: Vec<BreakdownCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub model: String,
    pub pipeline: Pipeline,
    /// Radius prefix toggle (s).
    pub prefix_on: bool,
    /// Restrictive existence rule toggle (r).
    pub rule_on: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: ReportConfig,
    pub n: usize,
    /// Micro classification accuracy over all records (CoP only).
    pub a_c: Option<f64>,
    /// Micro numeric accuracy over all records.
    pub a_q: f64,
    /// Macro averages over tasks present.
    pub avg_a_c: Option<f64>,
    pub avg_a_q: f64,
    pub rows: Vec<TaskRow>,
    pub bias_antisymmetric: bool,
    pub latency: BTreeMap<String, LatencyStats>,
    pub failures: BTreeMap<String, usize>,
    pub existence_breakdown: Option<ExistenceBreakdown>,
}

fn pct(num: usize, den: usize) -> f64 {
    100.0 * num as f64 / den as f64
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

const COP_STAGES: [Stage; 4] = [Stage::Classification, Stage::Extraction, Stage::Toolbox, Stage::Enhancement];

fn stage_ms(t: &StageTimings, s: Stage) -> f64 {
    match s {
        Stage::Classification => t.classification_ms,
        Stage::Extraction => t.extraction_ms,
        Stage::Toolbox => t.toolbox_ms,
        Stage::Enhancement => t.enhancement_ms,
        Stage::Osp => 0.0,
    }
}

pub fn compute_metrics(records: &[GradeRecord], config: ReportConfig) -> Result<MetricsReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let cop = config.pipeline == Pipeline::Cop;
    let mut rows: Vec<TaskRow> = TaskId::ALL
        .iter()
        .map(|t| {
            let of: Vec<&GradeRecord> = records.iter().filter(|r| r.task == *t).collect();
            let n_q = of.len();
            let n_c = of.iter().filter(|r| r.numeric_correct).count();
            let n_task_correct = of.iter().filter(|r| r.task_correct).count();
            TaskRow {
                task: *t,
                name: t.name().to_string(),
                n_q,
                n_c,
                n_task_correct,
                a_c: (cop && n_q > 0).then(|| pct(n_task_correct, n_q)),
                a_q: (n_q > 0).then(|| pct(n_c, n_q)),
                bias: 0,
                extremal: 0,
            }
        })
        .collect();
    let a_q: Vec<Option<f64>> = rows.iter().map(|r| r.a_q).collect();
    for ((row, b), e) in rows.iter_mut().zip(pairwise_bias(&a_q)).zip(extremal_bias(&a_q)) {
        row.bias = b;
        row.extremal = e;
    }
    let bias_antisymmetric = rows.iter().map(|r| r.bias).sum::<i32>() == 0;

    let n = records.len();
    let mut latency = BTreeMap::new();
    if cop {
        for (i, stage) in COP_STAGES.iter().enumerate() {
            // A stage counts for records that reached it.
            let mut xs: Vec<f64> = records
                .iter()
                .filter(|r| match r.failed_stage {
                    Some(f) => COP_STAGES.iter().position(|s| *s == f).unwrap_or(0) >= i,
                    None => *stage != Stage::Enhancement || r.timings.enhancement_ms > 0.0,
                })
                .map(|r| stage_ms(&r.timings, *stage))
                .collect();
            if let Some(s) = LatencyStats::from_samples(&mut xs) {
                latency.insert(stage.to_string(), s);
            }
        }
    }
    let mut totals: Vec<f64> = records.iter().map(|r| r.total_ms).collect();
    if let Some(s) = LatencyStats::from_samples(&mut totals) {
        latency.insert("total".into(), s);
    }

    let mut failures = BTreeMap::new();
    for r in records {
        if let Some(s) = r.failed_stage {
            *failures.entry(s.to_string()).or_insert(0) += 1;
        }
    }

    let existence: Vec<&GradeRecord> = records.iter().filter(|r| r.task == TaskId::Existence).collect();
    let existence_breakdown = (cop && !existence.is_empty()).then(|| {
        let m = existence.len();
        let mut cells: Vec<BreakdownCell> = TaskId::ALL[..9]
            .iter()
            .map(|t| BreakdownCell {
                label: t.name().to_string(),
                percent: pct(existence.iter().filter(|r| r.predicted_task == Some(*t)).count(), m),
            })
            .collect();
        cells.push(BreakdownCell {
            label: "none".into(),
            percent: pct(existence.iter().filter(|r| r.predicted_task.is_none()).count(), m),
        });
        cells.push(BreakdownCell {
            label: TaskId::Existence.name().to_string(),
            percent: pct(
                existence.iter().filter(|r| r.predicted_task == Some(TaskId::Existence)).count(),
                m,
            ),
        });
        ExistenceBreakdown { n: m, cells }
    });

    Ok(MetricsReport {
        n,
        a_c: cop.then(|| pct(records.iter().filter(|r| r.task_correct).count(), n)),
        a_q: pct(records.iter().filter(|r| r.numeric_correct).count(), n),
        avg_a_c: if cop { mean(rows.iter().filter_map(|r| r.a_c)) } else { None },
        avg_a_q: mean(rows.iter().filter_map(|r| r.a_q)).unwrap_or(0.0),
        rows,
        bias_antisymmetric,
        latency,
        failures,
        existence_breakdown,
        config,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.2}"))
}

/// Plain-text report: one row per task, `(k) name  A_C  A_Q  B`, an average
/// row, then latency and the existence breakdown.
pub fn render_table(r: &MetricsReport) -> String {
    let c = &r.config;
    let on = |b: bool| if b { "on" } else { "off" };
    let mut out = String::new();
    writeln!(
        out,
        "model: {}  pipeline: {}  s: {}  r: {}  N = {}",
        c.model,
        c.pipeline,
        on(c.prefix_on),
        on(c.rule_on),
        r.n
    )
    .unwrap();
    writeln!(out, "{:<22}{:>8}{:>8}{:>6}{:>7}", "Query task", "A_C", "A_Q", "B", "N_q").unwrap();
    for row in &r.rows {
        let label = format!("({}) {}", row.task.number(), row.name);
        writeln!(
            out,
            "{:<22}{:>8}{:>8}{:>6}{:>7}",
            label,
            cell(row.a_c),
            cell(row.a_q),
            format!("{:+}", row.bias).replace("+0", "0"),
            row.n_q
        )
        .unwrap();
    }
    writeln!(
        out,
        "{:<22}{:>8}{:>8}{:>6}{:>7}",
        "Average",
        cell(r.avg_a_c),
        format!("{:.2}", r.avg_a_q),
        "--",
        r.n
    )
    .unwrap();
    if !r.latency.is_empty() {
        writeln!(out, "\nlatency (ms)          mean      p50      p95").unwrap();
        let order = COP_STAGES.iter().map(|s| s.to_string()).chain(["total".to_string()]);
        for (stage, s) in order.filter_map(|k| r.latency.get(&k).map(|s| (k, s))) {
            writeln!(out, "{:<18}{:>9.3}{:>9.3}{:>9.3}", stage, s.mean_ms, s.p50_ms, s.p95_ms).unwrap();
        }
    }
    if let Some(b) = &r.existence_breakdown {
        writeln!(out, "\nexistence questions classified as (%, n = {}):", b.n).unwrap();
        for c in &b.cells {
            writeln!(out, "  {:<16}{:>7.2}", c.label, c.percent).unwrap();
        }
    }
    if !r.failures.is_empty() {
        let f: Vec<String> = r.failures.iter().map(|(k, v)| format!("{k}={v}")).collect();
        writeln!(out, "\nfailures: {}", f.join(" ")).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nr(values: Vec<Reading>) -> NumericResult {
        NumericResult {
            values,
            matched_ids: vec![],
        }
    }

    #[test]
    fn grading_tolerance_and_length() {
        let s = |x| Reading::Scalar(x);
        assert!(grade_numeric(&nr(vec![s(50.0)]), &nr(vec![s(50.0)])));
        assert!(grade_numeric(&nr(vec![s(50.0)]), &nr(vec![s(50.0000001)])));
        assert!(!grade_numeric(&nr(vec![s(50.0)]), &nr(vec![s(50.00001)])));
        assert!(!grade_numeric(&nr(vec![s(1.0), s(2.0)]), &nr(vec![s(1.0)])));
        assert!(!grade_numeric(&nr(vec![Reading::Triple([1.0, 2.0, 3.0])]), &nr(vec![s(1.0)])));
        assert!(grade_numeric(&nr(vec![]), &nr(vec![])));
    }

    #[test]
    fn final_line_normalization() {
        let p = |r: &str, t| parse_final(r, t).map(|n| n.values);
        assert_eq!(p("blah\nFINAL: 20.5 m", TaskId::Distance), Some(vec![Reading::Scalar(20.5)]));
        assert_eq!(p("FINAL: -1.25 m/s^2.", TaskId::Acceleration), Some(vec![Reading::Scalar(-1.25)]));
        assert_eq!(p("Final: Yes", TaskId::Existence), Some(vec![Reading::Scalar(1.0)]));
        assert_eq!(p("FINAL: no", TaskId::Existence), Some(vec![Reading::Scalar(0.0)]));
        assert_eq!(
            p("FINAL: Red, white", TaskId::Color),
            Some(vec![
                Reading::Scalar(Color::Red.code() as f64),
                Reading::Scalar(Color::White.code() as f64)
            ])
        );
        assert_eq!(
            p("FINAL: buses", TaskId::Classification),
            Some(vec![Reading::Scalar(VehicleType::Bus.code() as f64)])
        );
        assert_eq!(
            p("FINAL: none", TaskId::Status),
            Some(vec![Reading::Scalar(Signal::None.code() as f64)])
        );
        assert_eq!(p("FINAL: no matching vehicle", TaskId::Status), Some(vec![]));
        assert_eq!(
            p("FINAL: 4.5 x 1.8 x 1.5, 12 x 2.5 x 3.8", TaskId::Size),
            Some(vec![Reading::Triple([4.5, 1.8, 1.5]), Reading::Triple([12.0, 2.5, 3.8])])
        );
        assert_eq!(p("FINAL: 3", TaskId::Count), Some(vec![Reading::Scalar(3.0)]));
        assert_eq!(p("FINAL: 1, 2 and 3", TaskId::Heading).unwrap().len(), 3);
        assert_eq!(p("no final line", TaskId::Count), None);
        assert_eq!(p("FINAL: purple", TaskId::Color), None);
        assert_eq!(p("FINAL: maybe", TaskId::Existence), None);
    }

    #[test]
    fn pipeline_names() {
        assert_eq!("cop".parse::<Pipeline>().unwrap(), Pipeline::Cop);
        assert_eq!("OSP3".parse::<Pipeline>().unwrap(), Pipeline::Osp(3));
        assert!("osp5".parse::<Pipeline>().is_err());
        assert_eq!(Pipeline::Osp(2).to_string(), "osp2");
    }

    #[test]
    fn strict_maximum_scores_nine() {
        let mut a: Vec<Option<f64>> = (0..10).map(|i| Some(50.0 + i as f64)).collect();
        a[3] = Some(99.0);
        a[9] = Some(10.0);
        let b = pairwise_bias(&a);
        assert_eq!(b[3], 9);
        assert_eq!(b[9], -9);
        assert_eq!(b.iter().sum::<i32>(), 0);
        let e = extremal_bias(&a);
        assert_eq!((e[3], e[9]), (1, -1));
        assert_eq!(e.iter().filter(|x| **x != 0).count(), 2);
    }

    #[test]
    fn extremal_ties_share_marks() {
        let a = vec![Some(0.0), Some(0.0), Some(5.0), Some(5.0), None];
        assert_eq!(extremal_bias(&a), vec![-1, -1, 1, 1, 0]);
        assert_eq!(extremal_bias(&[Some(3.0), Some(3.0)]), vec![0, 0]);
        assert_eq!(pairwise_bias(&a), vec![-2, -2, 2, 2, 0]);
    }

    #[test]
    fn latency_percentiles() {
        let mut xs: Vec<f64> = (1..=100).map(f64::from).collect();
        let s = LatencyStats::from_samples(&mut xs).unwrap();
        assert_eq!((s.p50_ms, s.p95_ms), (50.0, 95.0));
        assert!((s.mean_ms - 50.5).abs() < 1e-12);
        assert!(LatencyStats::from_samples(&mut []).is_none());
    }
}
