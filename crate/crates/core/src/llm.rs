//! Language-model backends: a chat-completion HTTP client and deterministic
//! mocks for testing and calibration.

use std::collections::{HashMap, VecDeque};
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::qa::{display_answer, read_dataset, strip_prefix, QAPair};
use crate::scene_graph::Relation;
use crate::toolbox::{NumericResult, QueryParams, TaskId};
use crate::vocab::{Color, VehicleType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Classification,
    Extraction,
    Toolbox,
    Enhancement,
    Osp,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Classification => "classification",
            Stage::Extraction => "extraction",
            Stage::Toolbox => "toolbox",
            Stage::Enhancement => "enhancement",
            Stage::Osp => "osp",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A completion request. Only `prompt` goes over the wire; the other fields
/// let mocks answer without parsing prompt text.
#[derive(Debug, Clone)]
pub struct LlmRequest<'a> {
    pub stage: Stage,
    pub prompt: String,
    pub question: &'a str,
    pub task: Option<TaskId>,
    pub numeric: Option<&'a NumericResult>,
    /// Caller-assigned request identity, e.g. the dataset index.
    pub key: Option<u64>,
    /// 0 for the first call, 1 for the repair retry.
    pub attempt: u32,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("request timed out after {0} ms")]
    Timeout(u64),
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("scripted transcript exhausted")]
    Exhausted,
    #[error("backend config: {0}")]
    Config(String),
}

impl BackendError {
    /// Errors that will not go away by moving on to the next question.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            BackendError::Unreachable(_) | BackendError::Config(_) | BackendError::Exhausted
        )
    }
}

pub trait LlmBackend: Send + Sync {
    fn complete(&self, req: &LlmRequest) -> Result<String, BackendError>;

    /// Model identity echoed in reports.
    fn model_id(&self) -> String;

    /// True when requests must be issued one at a time, in order.
    fn serial(&self) -> bool {
        false
    }
}

fn default_timeout_ms() -> u64 {
    60_000
}

fn default_concurrency() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    Remote {
        /// Full URL of the chat-completion route.
        endpoint: String,
        model: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        /// Environment variable holding a bearer token.
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default = "default_concurrency")]
        concurrency: usize,
    },
    MockOracle {
        #[serde(default)]
        dataset: Option<PathBuf>,
    },
    MockNoisy {
        #[serde(default)]
        dataset: Option<PathBuf>,
        error_rate: f64,
        seed: u64,
    },
    MockScripted {
        transcript: Vec<String>,
    },
}

impl BackendConfig {
    pub fn from_json(text: &str) -> Result<Self, BackendError> {
        serde_json::from_str(text).map_err(|e| BackendError::Config(e.to_string()))
    }

    /// Requests in flight at once.
    pub fn concurrency(&self) -> usize {
        match self {
            BackendConfig::Remote { concurrency, .. } => (*concurrency).max(1),
            BackendConfig::MockScripted { .. } => 1,
            _ => rayon::current_num_threads(),
        }
    }

    /// Builds the backend. Mocks learn from `pairs` plus any dataset file
    /// named in the config; `road_aliases` maps road names to ids.
    pub fn build(
        &self,
        pairs: &[QAPair],
        road_aliases: &[(String, String)],
    ) -> Result<Box<dyn LlmBackend>, BackendError> {
        let load = |path: &Option<PathBuf>| -> Result<Vec<QAPair>, BackendError> {
            let mut all = pairs.to_vec();
            if let Some(p) = path {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| BackendError::Config(format!("{}: {e}", p.display())))?;
                all.extend(read_dataset(&text).map_err(|e| BackendError::Config(e.to_string()))?);
            }
            Ok(all)
        };
        Ok(match self {
            BackendConfig::Remote {
                endpoint,
                model,
                timeout_ms,
                api_key_env,
                ..
            } => {
                let api_key = match api_key_env {
                    Some(var) => Some(std::env::var(var).map_err(|_| {
                        BackendError::Config(format!("environment variable {var} is not set"))
                    })?),
                    None => None,
                };
                Box::new(RemoteBackend::new(endpoint, model, *timeout_ms, api_key))
            }
            BackendConfig::MockOracle { dataset } => {
                Box::new(MockOracle::new(&load(dataset)?, road_aliases.to_vec()))
            }
            BackendConfig::MockNoisy {
                dataset,
                error_rate,
                seed,
            } => {
                if !(0.0..=1.0).contains(error_rate) {
                    return Err(BackendError::Config("error_rate must be in [0, 1]".into()));
                }
                Box::new(MockNoisy {
                    inner: MockOracle::new(&load(dataset)?, road_aliases.to_vec()),
                    error_rate: *error_rate,
                    seed: *seed,
                })
            }
            BackendConfig::MockScripted { transcript } => Box::new(MockScripted::new(transcript.clone())),
        })
    }
}

/// Client for the chat-completion wire protocol:
/// `{model, messages:[{role,content}], temperature}` in,
/// `{choices:[{message:{content}}]}` out.
pub struct RemoteBackend {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    timeout_ms: u64,
    api_key: Option<String>,
}

impl RemoteBackend {
    pub fn new(endpoint: &str, model: &str, timeout_ms: u64, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            timeout_ms,
            api_key,
        }
    }

    fn map_err(&self, e: ureq::Error) -> BackendError {
        match e {
            ureq::Error::Timeout(_) => BackendError::Timeout(self.timeout_ms),
            ureq::Error::Io(ref io) if io.kind() == std::io::ErrorKind::TimedOut => {
                BackendError::Timeout(self.timeout_ms)
            }
            ureq::Error::Io(_) | ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => {
                BackendError::Unreachable(format!("{}: {e}", self.endpoint))
            }
            ureq::Error::BadUri(_) => BackendError::Config(e.to_string()),
            other => BackendError::Protocol(other.to_string()),
        }
    }
}

impl LlmBackend for RemoteBackend {
    fn complete(&self, req: &LlmRequest) -> Result<String, BackendError> {
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": 0,
        });
        let mut request = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = request.send_json(&body).map_err(|e| self.map_err(e))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| self.map_err(e))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Http { status, body: text });
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| BackendError::Protocol(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Protocol("missing choices[0].message.content".into()))
    }

    fn model_id(&self) -> String {
        self.model.clone()
    }
}

/// Rule-based reader of questions, built on the task keyword lists.
#[derive(Debug, Clone, Default)]
pub struct KeywordInterpreter {
    /// (lowercase alias, road id), longest alias first.
    road_aliases: Vec<(String, String)>,
}

const TASK_KEYWORDS: &[(TaskId, &[&str])] = &[
    (TaskId::Status, &["turn signal", "lights", "blinker", "indicator", "signaling", "signal"]),
    (
        TaskId::Size,
        &["size", "length", "width", "height", "how large", "how big", "dimension"],
    ),
    (TaskId::Color, &["color", "colour"]),
    (TaskId::Classification, &["what type", "what kind", "type of", "kind of", "what vehicle"]),
    (TaskId::Distance, &["distance", "how far", "how many meters", "meters away"]),
    (
        TaskId::Acceleration,
        &["accelerat", "decelerat", "slowing down", "speeding up", "braking hard"],
    ),
    (TaskId::Heading, &["direction", "heading", "driving toward", "moving toward"]),
    (TaskId::Velocity, &["speed", "velocity", "how fast", "km/h"]),
    (TaskId::Count, &["how many", "crowded", "blocking", "dense", "number of", "count"]),
    (TaskId::Existence, &["is there", "are there", "exist", "any "]),
];

fn contains_word(text: &str, word: &str) -> bool {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .any(|w| w == word)
}

impl KeywordInterpreter {
    pub fn new(road_aliases: Vec<(String, String)>) -> Self {
        let mut road_aliases: Vec<(String, String)> = road_aliases
            .into_iter()
            .map(|(a, id)| (a.to_lowercase(), id))
            .collect();
        road_aliases.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));
        Self { road_aliases }
    }

    pub fn classify(&self, question: &str) -> Option<TaskId> {
        let q = strip_prefix(question.trim()).to_lowercase();
        TASK_KEYWORDS
            .iter()
            .find(|(_, kws)| kws.iter().any(|k| q.contains(k)))
            .map(|(t, _)| *t)
    }

    pub fn extract(&self, question: &str) -> QueryParams {
        let q = strip_prefix(question.trim()).to_lowercase();
        let vtype = VehicleType::ALL.iter().copied().find(|t| {
            contains_word(&q, t.as_str())
                || contains_word(&q, &format!("{}s", t.as_str()))
                || (*t == VehicleType::Bus && contains_word(&q, "buses"))
        });
        let color = Color::ALL
            .iter()
            .copied()
            .find(|c| contains_word(&q, c.as_str()) || (*c == Color::Gray && contains_word(&q, "grey")));
        let relation = self.relation(&q);
        QueryParams {
            vtype,
            color,
            relation,
        }
    }

    fn relation(&self, q: &str) -> Relation {
        if let Some((_, id)) = self.road_aliases.iter().find(|(alias, _)| q.contains(alias.as_str())) {
            return Relation::Road(id.clone());
        }
        if let Some(pos) = q.find("road ") {
            let name: String = q[pos + 5..]
                .chars()
                .take_while(|c| c.is_ascii_alphanumeric() || *c == '_')
                .collect();
            if !name.is_empty() {
                return Relation::Road(name.to_uppercase());
            }
        }
        let table: &[(&[&str], Relation)] = &[
            (&["left lane"], Relation::LEFT_LANE),
            (&["right lane"], Relation::RIGHT_LANE),
            (&["my lane", "same lane", "this lane"], Relation::SAME_LANE),
            (&["in front", "ahead"], Relation::FRONT),
            (&["behind", "rear"], Relation::REAR),
            (&["my left", "left of me", "left side"], Relation::LEFT),
            (&["my right", "right of me", "right side"], Relation::RIGHT),
        ];
        table
            .iter()
            .find(|(kws, _)| kws.iter().any(|k| q.contains(k)))
            .map_or(Relation::Surrounding, |(_, r)| r.clone())
    }
}

fn normalize_question(q: &str) -> String {
    strip_prefix(q.trim()).trim().to_lowercase()
}

/// Answers from dataset ground truth when the question is known and from
/// the keyword interpreter otherwise.
pub struct MockOracle {
    by_text: HashMap<String, (TaskId, QueryParams)>,
    by_key: Vec<QAPair>,
    interpreter: KeywordInterpreter,
}

impl MockOracle {
    pub fn new(pairs: &[QAPair], road_aliases: Vec<(String, String)>) -> Self {
        let by_text = pairs
            .iter()
            .map(|p| (normalize_question(&p.question), (p.meta.task, p.meta.params.clone())))
            .collect();
        Self {
            by_text,
            by_key: pairs.to_vec(),
            interpreter: KeywordInterpreter::new(road_aliases),
        }
    }

    fn pair_for(&self, req: &LlmRequest) -> Option<&QAPair> {
        let pair = self.by_key.get(req.key? as usize)?;
        (normalize_question(&pair.question) == normalize_question(req.question)).then_some(pair)
    }

    pub fn task_for(&self, req: &LlmRequest) -> Option<TaskId> {
        if let Some(p) = self.pair_for(req) {
            return Some(p.meta.task);
        }
        match self.by_text.get(&normalize_question(req.question)) {
            Some((t, _)) => Some(*t),
            None => self.interpreter.classify(req.question),
        }
    }

    fn params_for(&self, req: &LlmRequest) -> QueryParams {
        if let Some(p) = self.pair_for(req) {
            return p.meta.params.clone();
        }
        match self.by_text.get(&normalize_question(req.question)) {
            Some((_, p)) => p.clone(),
            None => self.interpreter.extract(req.question),
        }
    }
}

fn advice_for(task: Option<TaskId>, numeric: Option<&NumericResult>) -> String {
    let n = numeric.map_or(0, |r| r.matched_ids.len());
    let nearest = match (task, numeric) {
        (Some(TaskId::Distance), Some(r)) => r.values.first().map(|v| v.components()[0]),
        _ => None,
    };
    match (n, nearest) {
        (0, _) => "No matching vehicle nearby; keep your current lane and speed.".into(),
        (_, Some(d)) if d < 20.0 => "The vehicle is close; increase your following distance.".into(),
        _ if n > 5 => "Traffic is dense around you; drive cautiously and avoid lane changes.".into(),
        _ => "Keep a safe distance and watch for lane changes.".into(),
    }
}

/// Canonical answer text for a numeric result, as used after `FINAL:`.
pub fn final_text(task: TaskId, truth: &NumericResult) -> String {
    if task == TaskId::Existence {
        let yes = truth.values.first().is_some_and(|v| v.components()[0] != 0.0);
        return if yes { "yes" } else { "no" }.into();
    }
    if truth.values.is_empty() {
        return "no matching vehicle".into();
    }
    let answer = display_answer(task, truth);
    let items = match answer {
        Value::Array(items) if task != TaskId::Size || matches!(items.first(), Some(Value::Array(_))) => items,
        other => vec![other],
    };
    items
        .iter()
        .map(|v| match v {
            Value::String(s) => s.clone(),
            Value::Array(t) => t.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" x "),
            other => other.to_string(),
        })
        .collect::<Vec<_>>()
        .join(", ")
}

impl LlmBackend for MockOracle {
    fn complete(&self, req: &LlmRequest) -> Result<String, BackendError> {
        Ok(match req.stage {
            Stage::Classification => match self.task_for(req) {
                Some(t) => json!({"task": t.number()}).to_string(),
                None => "I cannot determine the task.".into(),
            },
            Stage::Extraction => serde_json::to_string(&self.params_for(req)).unwrap(),
            Stage::Enhancement => {
                let answer = match (req.task, req.numeric) {
                    (Some(t), Some(r)) => format!("The {} result is {}.", t.name(), final_text(t, r)),
                    _ => "No result is available.".into(),
                };
                json!({"answer": answer, "advice": advice_for(req.task, req.numeric)}).to_string()
            }
            Stage::Osp => match self.pair_for(req) {
                Some(p) => format!("FINAL: {}", final_text(p.meta.task, &p.meta.truth)),
                None => "FINAL: unknown".into(),
            },
            Stage::Toolbox => return Err(BackendError::Config("toolbox stage needs no model".into())),
        })
    }

    fn model_id(&self) -> String {
        "mock_oracle".into()
    }
}

/// The oracle with classification errors injected at a fixed rate. Each
/// request draws from its own stream keyed by `(seed, key)`, so results do
/// not depend on scheduling.
pub struct MockNoisy {
    inner: MockOracle,
    error_rate: f64,
    seed: u64,
}

fn request_seed(seed: u64, req: &LlmRequest) -> u64 {
    let key = req.key.unwrap_or_else(|| {
        // FNV-1a over the normalized question.
        normalize_question(req.question)
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
    });
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ key
}

impl LlmBackend for MockNoisy {
    fn complete(&self, req: &LlmRequest) -> Result<String, BackendError> {
        if req.stage == Stage::Classification {
            if let Some(truth) = self.inner.task_for(req) {
                let mut rng = ChaCha8Rng::seed_from_u64(request_seed(self.seed, req));
                if rng.gen_bool(self.error_rate) {
                    let others: Vec<TaskId> = TaskId::ALL.into_iter().filter(|t| *t != truth).collect();
                    let wrong = others[rng.gen_range(0..others.len())];
                    return Ok(json!({"task": wrong.number()}).to_string());
                }
            }
        }
        self.inner.complete(req)
    }

    fn model_id(&self) -> String {
        format!("mock_noisy(p={})", self.error_rate)
    }
}

/// Replays a fixed transcript, one reply per request, in order.
pub struct MockScripted {
    replies: Mutex<VecDeque<String>>,
}

impl MockScripted {
    pub fn new(transcript: Vec<String>) -> Self {
        Self {
            replies: Mutex::new(transcript.into()),
        }
    }

    pub fn remaining(&self) -> usize {
        self.replies.lock().unwrap().len()
    }
}

impl LlmBackend for MockScripted {
    fn complete(&self, _req: &LlmRequest) -> Result<String, BackendError> {
        self.replies.lock().unwrap().pop_front().ok_or(BackendError::Exhausted)
    }

    fn model_id(&self) -> String {
        "mock_scripted".into()
    }

    fn serial(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toolbox::Reading;

    fn scalar(v: f64) -> Reading {
        Reading::Scalar(v)
    }

    fn req(stage: Stage, q: &str) -> LlmRequest<'_> {
        LlmRequest {
            stage,
            prompt: String::new(),
            question: q,
            task: None,
            numeric: None,
            key: None,
            attempt: 0,
        }
    }

    #[test]
    fn keyword_classification() {
        let k = KeywordInterpreter::default();
        assert_eq!(k.classify("how fast is the bus ahead?"), Some(TaskId::Velocity));
        assert_eq!(k.classify("is there any car on my left lane?"), Some(TaskId::Existence));
        assert_eq!(k.classify("how many meters away is the red car?"), Some(TaskId::Distance));
        assert_eq!(k.classify("is the truck speeding up?"), Some(TaskId::Acceleration));
        assert_eq!(k.classify("is the truck in front of me using its turn signal?"), Some(TaskId::Status));
        assert_eq!(k.classify("hello"), None);
    }

    #[test]
    fn keyword_extraction() {
        let k = KeywordInterpreter::new(vec![("Main Street".into(), "R1".into())]);
        let p = k.extract("the yellow truck on my left lane");
        assert_eq!(p.vtype, Some(VehicleType::Truck));
        assert_eq!(p.color, Some(Color::Yellow));
        assert_eq!(p.relation, Relation::LEFT_LANE);
        assert_eq!(k.extract("the yellow truck").relation, Relation::Surrounding);
        assert_eq!(k.extract("vehicles on Main Street").relation, Relation::Road("R1".into()));
        assert_eq!(k.extract("how many buses are on road R2?").relation, Relation::Road("R2".into()));
        assert_eq!(k.extract("how many buses are on road R2?").vtype, Some(VehicleType::Bus));
    }

    #[test]
    fn noisy_is_deterministic_per_key() {
        let noisy = MockNoisy {
            inner: MockOracle::new(&[], vec![]),
            error_rate: 0.5,
            seed: 3,
        };
        let mut r = req(Stage::Classification, "how fast is the bus ahead?");
        let mut wrong = 0;
        for key in 0..200 {
            r.key = Some(key);
            let a = noisy.complete(&r).unwrap();
            assert_eq!(a, noisy.complete(&r).unwrap());
            if a != r#"{"task":1}"# {
                wrong += 1;
            }
        }
        assert!((70..130).contains(&wrong), "{wrong}");
    }

    #[test]
    fn scripted_replays_in_order() {
        let s = MockScripted::new(vec!["a".into(), "b".into()]);
        let r = req(Stage::Osp, "q");
        assert_eq!(s.complete(&r).unwrap(), "a");
        assert_eq!(s.complete(&r).unwrap(), "b");
        assert_eq!(s.complete(&r), Err(BackendError::Exhausted));
    }

    #[test]
    fn config_parsing() {
        let c = BackendConfig::from_json(
            r#"{"kind":"remote","endpoint":"http://localhost:11434/v1/chat/completions","model":"qwen3:8b","timeout_ms":5000}"#,
        )
        .unwrap();
        assert!(matches!(c, BackendConfig::Remote { timeout_ms: 5000, .. }));
        let n = BackendConfig::from_json(r#"{"kind":"mock_noisy","error_rate":0.1,"seed":7}"#).unwrap();
        assert!(n.build(&[], &[]).is_ok());
        assert!(BackendConfig::from_json(r#"{"kind":"mock_noisy","error_rate":2,"seed":7}"#)
            .unwrap()
            .build(&[], &[])
            .is_err());
        assert!(BackendConfig::from_json(r#"{"kind":"psychic"}"#).is_err());
    }

    #[test]
    fn final_text_forms() {
        let r = |vals: Vec<Reading>| NumericResult {
            matched_ids: vals.iter().map(|_| "x".to_string()).collect(),
            values: vals,
        };
        assert_eq!(final_text(TaskId::Color, &r(vec![scalar(1.0)])), "yellow");
        assert_eq!(final_text(TaskId::Distance, &r(vec![scalar(50.0), scalar(60.5)])), "50.0, 60.5");
        assert_eq!(final_text(TaskId::Existence, &r(vec![scalar(0.0)])), "no");
        assert_eq!(final_text(TaskId::Count, &r(vec![scalar(3.0)])), "3");
        assert_eq!(
            final_text(TaskId::Size, &r(vec![Reading::Triple([4.5, 1.8, 1.5])])),
            "4.5 x 1.8 x 1.5"
        );
    }
}
