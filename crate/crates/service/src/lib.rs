//! Service plumbing for the `dynmap` binary: configuration, the live scene
//! driver and the HTTP API.

pub mod api;

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use dynmap_core::bus::{render_ls, LinguisticScene, DEFAULT_QUEUE_CAPACITY, DEFAULT_SCENE_HZ};
use dynmap_core::cop::{Cop, CopError, CoPResult, PromptSet};
use dynmap_core::llm::{BackendConfig, BackendError, LlmBackend};
use dynmap_core::pipeline::{PipelineError, PipelineOptions, ScenePipeline, DEFAULT_AV_RANGE};
use dynmap_core::road::{MapError, RoadNetwork};
use dynmap_core::traffic::SimConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::watch;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompts(#[from] CopError),
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}
fn default_tick_hz() -> f64 {
    DEFAULT_SCENE_HZ
}
fn default_queue_capacity() -> usize {
    DEFAULT_QUEUE_CAPACITY
}
fn default_av_range() -> f64 {
    DEFAULT_AV_RANGE
}
fn default_history() -> usize {
    600
}
fn yes() -> bool {
    true
}

/// Service configuration file. Relative paths resolve against the file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Simulation config file; defaults apply when absent.
    #[serde(default)]
    pub sim_config: Option<PathBuf>,
    /// Road network file; the bundled crossing when absent.
    #[serde(default)]
    pub network: Option<PathBuf>,
    pub backend: BackendConfig,
    /// Directory of prompt templates; the built-in set when absent.
    #[serde(default)]
    pub prompt_dir: Option<PathBuf>,
    /// Scene construction rate, Hz of wall-clock time.
    #[serde(default = "default_tick_hz")]
    pub tick_hz: f64,
    #[serde(default = "default_queue_capacity")]
    pub queue_capacity: usize,
    #[serde(default = "default_av_range")]
    pub av_range: f64,
    /// Scenes kept for pinned queries.
    #[serde(default = "default_history")]
    pub history: usize,
    #[serde(default = "yes")]
    pub restrictive_rule: bool,
    #[serde(default = "yes")]
    pub enhance: bool,
}

impl ServiceConfig {
    pub fn new(backend: BackendConfig) -> Self {
        Self {
            listen: default_listen(),
            sim_config: None,
            network: None,
            backend,
            prompt_dir: None,
            tick_hz: default_tick_hz(),
            queue_capacity: default_queue_capacity(),
            av_range: default_av_range(),
            history: default_history(),
            restrictive_rule: true,
            enhance: true,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ServiceError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let path = path.as_ref();
        let mut cfg: Self = serde_json::from_str(&read(path)?)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(p) = p.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.sim_config);
        fix(&mut cfg.network);
        fix(&mut cfg.prompt_dir);
        match &mut cfg.backend {
            BackendConfig::MockOracle { dataset } | BackendConfig::MockNoisy { dataset, .. } => fix(dataset),
            _ => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        let bad = |m: String| Err(ServiceError::Config(m));
        if !(self.tick_hz > 0.0 && self.tick_hz.is_finite()) {
            return bad(format!("tick_hz must be positive, got {}", self.tick_hz));
        }
        if self.queue_capacity == 0 {
            return bad("queue_capacity must be positive".into());
        }
        if self.history == 0 {
            return bad("history must be positive".into());
        }
        let dataset = match &self.backend {
            BackendConfig::MockOracle { dataset } | BackendConfig::MockNoisy { dataset, .. } => dataset.as_ref(),
            _ => None,
        };
        for p in [&self.sim_config, &self.network, &self.prompt_dir]
            .into_iter()
            .flatten()
            .chain(dataset)
        {
            if !p.exists() {
                return bad(format!("{} does not exist", p.display()));
            }
        }
        Ok(())
    }

    pub fn pipeline_options(&self) -> PipelineOptions {
        PipelineOptions {
            queue_capacity: self.queue_capacity,
            scene_hz: self.tick_hz,
            av_range: self.av_range,
            bus_latency_ms: 0.0,
        }
    }
}

fn read(path: &Path) -> Result<String, ServiceError> {
    std::fs::read_to_string(path).map_err(|source| ServiceError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_sim_config(path: Option<&Path>) -> Result<SimConfig, ServiceError> {
    let cfg = match path {
        Some(p) => serde_json::from_str(&read(p)?).map_err(|e| ServiceError::Config(format!("{}: {e}", p.display())))?,
        None => SimConfig::default(),
    };
    cfg.validate().map_err(|e| ServiceError::Config(e.to_string()))?;
    Ok(cfg)
}

pub fn load_network(path: Option<&Path>) -> Result<RoadNetwork, ServiceError> {
    Ok(match path {
        Some(p) => RoadNetwork::load(p)?,
        None => RoadNetwork::net_cross(),
    })
}

pub fn load_prompts(dir: Option<&Path>, rule: bool) -> Result<PromptSet, ServiceError> {
    let p = match dir {
        Some(d) => PromptSet::load_dir(d)?,
        None => PromptSet::default(),
    };
    Ok(p.with_rule(rule))
}

/// A constructed scene with its canonical JSON rendering.
#[derive(Debug)]
pub struct SceneEntry {
    pub scene: LinguisticScene,
    pub json: String,
}

impl SceneEntry {
    pub fn new(scene: LinguisticScene) -> Self {
        let json = render_ls(&scene);
        Self { scene, json }
    }
}

/// What `/query` and `ask` need to answer a question.
#[derive(Clone)]
pub struct QueryEngine {
    pub backend: Arc<dyn LlmBackend>,
    pub prompts: Arc<PromptSet>,
    pub network: Arc<RoadNetwork>,
    pub enhance: bool,
}

/// Failure to answer a query, mapped onto HTTP statuses by the API layer.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum QueryError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("{0}")]
    NotFound(String),
    #[error("{stage} stage failed: {message}")]
    Stage { stage: String, message: String },
}

impl QueryEngine {
    pub fn from_config(cfg: &ServiceConfig, network: Arc<RoadNetwork>) -> Result<Self, ServiceError> {
        let backend: Arc<dyn LlmBackend> = Arc::from(cfg.backend.build(&[], &network.road_aliases())?);
        Ok(Self {
            backend,
            prompts: Arc::new(load_prompts(cfg.prompt_dir.as_deref(), cfg.restrictive_rule)?),
            network,
            enhance: cfg.enhance,
        })
    }

    /// Answers against a pinned scene. The ego defaults to the scene's first AV.
    pub fn answer(&self, question: &str, ego_id: Option<&str>, ls: &LinguisticScene) -> Result<CoPResult, QueryError> {
        if question.trim().is_empty() {
            return Err(QueryError::EmptyQuestion);
        }
        let ego = match ego_id {
            Some(e) => e.to_string(),
            None => ls
                .av_ids()
                .first()
                .map(|s| s.to_string())
                .ok_or_else(|| QueryError::NotFound(format!("scene {} has no AV", ls.scene_id)))?,
        };
        if !ls.object(&ego).is_some_and(|o| o.is_av()) {
            return Err(QueryError::NotFound(format!("no AV {ego} in scene {}", ls.scene_id)));
        }
        let mut cop = Cop::new(self.backend.as_ref(), &self.prompts);
        cop.network = Some(&self.network);
        cop.enhance = self.enhance;
        cop.answer(question, ls, &ego, None).map_err(|f| QueryError::Stage {
            stage: f.stage.to_string(),
            message: f.error.to_string(),
        })
    }
}

/// Shared by all handlers. Scenes are immutable once published.
pub struct AppState {
    pub config: ServiceConfig,
    pub engine: QueryEngine,
    latest: watch::Sender<Option<Arc<SceneEntry>>>,
    history: RwLock<VecDeque<Arc<SceneEntry>>>,
    built: AtomicU64,
    started: Instant,
}

impl AppState {
    pub fn new(config: ServiceConfig, engine: QueryEngine) -> Self {
        Self {
            history: RwLock::new(VecDeque::with_capacity(config.history)),
            config,
            engine,
            latest: watch::channel(None).0,
            built: AtomicU64::new(0),
            started: Instant::now(),
        }
    }

    pub fn publish(&self, scene: LinguisticScene) {
        let entry = Arc::new(SceneEntry::new(scene));
        {
            let mut h = self.history.write().unwrap();
            if h.len() == self.config.history {
                h.pop_front();
            }
            h.push_back(Arc::clone(&entry));
        }
        self.built.fetch_add(1, Ordering::Relaxed);
        self.latest.send_replace(Some(entry));
    }

    pub fn latest(&self) -> Option<Arc<SceneEntry>> {
        self.latest.borrow().clone()
    }

    pub fn scene(&self, id: u64) -> Option<Arc<SceneEntry>> {
        let h = self.history.read().unwrap();
        // Ids are consecutive, so index arithmetic finds the entry.
        let first = h.front()?.scene.scene_id;
        h.get(id.checked_sub(first)? as usize).filter(|e| e.scene.scene_id == id).cloned()
    }

    pub fn subscribe(&self) -> watch::Receiver<Option<Arc<SceneEntry>>> {
        self.latest.subscribe()
    }

    pub fn scenes_built(&self) -> u64 {
        self.built.load(Ordering::Relaxed)
    }

    pub fn uptime(&self) -> Duration {
        self.started.elapsed()
    }
}

/// A running scene driver plus the state it feeds.
pub struct Service {
    pub state: Arc<AppState>,
    stop: Arc<AtomicBool>,
    driver: Option<JoinHandle<()>>,
}

impl Service {
    /// Loads every resource named by `config` and starts the driver.
    pub fn start(config: ServiceConfig) -> Result<Self, ServiceError> {
        config.validate()?;
        let network = Arc::new(load_network(config.network.as_deref())?);
        let sim = load_sim_config(config.sim_config.as_deref())?;
        let pipeline = ScenePipeline::new(sim, Arc::clone(&network), &config.pipeline_options())?;
        let engine = QueryEngine::from_config(&config, network)?;
        let state = Arc::new(AppState::new(config, engine));
        let stop = Arc::new(AtomicBool::new(false));
        let driver = spawn_driver(Arc::clone(&state), pipeline, Arc::clone(&stop));
        Ok(Self {
            state,
            stop,
            driver: Some(driver),
        })
    }

    pub fn router(&self) -> axum::Router {
        api::router(Arc::clone(&self.state))
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(d) = self.driver.take() {
            let _ = d.join();
        }
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Single writer: steps the pipeline until a scene appears, publishes it,
/// and waits for the next wall-clock tick. Runs past the configured sim
/// duration until stopped.
pub fn spawn_driver(state: Arc<AppState>, mut pipeline: ScenePipeline, stop: Arc<AtomicBool>) -> JoinHandle<()> {
    let period = Duration::from_secs_f64(1.0 / state.config.tick_hz);
    std::thread::spawn(move || {
        let mut next = Instant::now();
        while !stop.load(Ordering::Relaxed) {
            let scene = loop {
                match pipeline.tick() {
                    Ok(Some(s)) => break s,
                    Ok(None) => continue,
                    Err(e) => {
                        log::error!("scene driver stopped: {e}");
                        return;
                    }
                }
            };
            state.publish(scene);
            next += period;
            let now = Instant::now();
            if next > now {
                std::thread::sleep(next - now);
            } else {
                // Fell behind; resynchronize instead of bursting.
                next = now;
            }
        }
    })
}
