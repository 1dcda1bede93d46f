//! Scene stream driver: simulator → perception → bus → freshness queue →
//! scene constructor.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{
    render_ls, Bus, BusError, FreshnessQueue, LinguisticScene, OiMessage, SceneConstructor, Subscription,
    DEFAULT_QUEUE_CAPACITY, DEFAULT_SCENE_HZ, OI_TOPIC,
};
use crate::perception::{
    default_sensors, perceive_av, perceive_rsu, ObjectInfo, PerceptionError, SensorKind, SensorSpec,
};
use crate::road::RoadNetwork;
use crate::traffic::{SimConfig, SimError, World};

pub const DEFAULT_AV_RANGE: f64 = 50.0;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error("invalid pipeline option: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineOptions {
    pub queue_capacity: usize,
    pub scene_hz: f64,
    /// Onboard sensor range of every AV, meters.
    pub av_range: f64,
    pub bus_latency_ms: f64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            scene_hz: DEFAULT_SCENE_HZ,
            av_range: DEFAULT_AV_RANGE,
            bus_latency_ms: 0.0,
        }
    }
}

impl PipelineOptions {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.queue_capacity == 0 {
            return Err(PipelineError::Invalid("queue_capacity must be positive".into()));
        }
        if !(self.scene_hz > 0.0 && self.scene_hz.is_finite()) {
            return Err(PipelineError::Invalid("scene_hz must be positive".into()));
        }
        if !(self.av_range > 0.0) {
            return Err(PipelineError::Invalid("av_range must be positive".into()));
        }
        if !(self.bus_latency_ms >= 0.0) {
            return Err(PipelineError::Invalid("bus_latency_ms must be non-negative".into()));
        }
        Ok(())
    }
}

pub struct ScenePipeline {
    world: World,
    sensors: Vec<SensorSpec>,
    bus: Bus,
    sub: Subscription,
    queue: FreshnessQueue<ObjectInfo>,
    constructor: SceneConstructor,
}

impl ScenePipeline {
    pub fn new(sim: SimConfig, network: Arc<RoadNetwork>, opts: &PipelineOptions) -> Result<Self, PipelineError> {
        opts.validate()?;
        let world = World::new(sim, Arc::clone(&network))?;
        let av_ids: Vec<String> = world.agents().iter().filter(|a| a.is_av()).map(|a| a.id.clone()).collect();
        let sensors = default_sensors(&network, &av_ids, opts.av_range);
        let bus = Bus::with_latency_ms(opts.bus_latency_ms);
        let sub = bus.subscribe(OI_TOPIC);
        Ok(Self {
            world,
            sensors,
            bus,
            sub,
            queue: FreshnessQueue::new(opts.queue_capacity),
            constructor: SceneConstructor::new(opts.scene_hz),
        })
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn queue(&self) -> &FreshnessQueue<ObjectInfo> {
        &self.queue
    }

    /// Remaining steps before the configured duration is reached.
    pub fn finished(&self) -> bool {
        self.world.step_index() >= self.world.config().steps()
    }

    /// Perceives and publishes at the current time, drains the bus into the
    /// queue, maybe builds a scene, then advances the world one step.
    pub fn tick(&mut self) -> Result<Option<LinguisticScene>, PipelineError> {
        let snap = self.world.snapshot();
        // Sensors run in parallel; publication order follows the sensor list.
        let batches: Vec<Result<(String, Vec<ObjectInfo>), PerceptionError>> = self
            .sensors
            .par_iter()
            .map(|spec| {
                let recs = match spec.kind {
                    SensorKind::Av { .. } => perceive_av(&snap, &spec.id, spec)?,
                    SensorKind::Rsu { .. } => perceive_rsu(&snap, spec)?,
                };
                Ok((spec.id.clone(), recs))
            })
            .collect();
        for b in batches {
            let (id, recs) = b?;
            self.bus.publish(OiMessage::new(id, snap.t, recs))?;
        }
        for msg in self.sub.drain_ready(snap.t) {
            self.queue.push(msg.records.iter().cloned());
        }
        let scene = self.constructor.maybe_construct(&self.queue, self.world.network(), snap.t);
        self.world.step();
        Ok(scene)
    }

    /// Drives the pipeline to the end of the configured duration.
    pub fn run(mut self, mut on_scene: impl FnMut(LinguisticScene)) -> Result<World, PipelineError> {
        while !self.finished() {
            if let Some(s) = self.tick()? {
                on_scene(s);
            }
        }
        Ok(self.world)
    }
}

pub fn run_scenes(
    sim: SimConfig,
    network: Arc<RoadNetwork>,
    opts: &PipelineOptions,
) -> Result<Vec<LinguisticScene>, PipelineError> {
    let mut scenes = Vec::new();
    ScenePipeline::new(sim, network, opts)?.run(|s| scenes.push(s))?;
    Ok(scenes)
}

/// JSONL rendering, one canonical scene per line.
pub fn render_stream(scenes: &[LinguisticScene]) -> String {
    let mut out = String::new();
    for s in scenes {
        out.push_str(&render_ls(s));
        out.push('\n');
    }
    out
}
