//! Onboard (AV) and roadside (RSU) perception models over ground-truth
//! snapshots. Sensing is perfect: a sensor reports every object inside its
//! footprint with exact attributes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::road::{LaneSection, RoadNetwork};
use crate::traffic::{Snapshot, VehicleAgent};
use crate::vocab::{Color, Signal, VehicleType};

/// One perceived-object record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInfo {
    pub id: String,
    pub ts: f64,
    pub x: f64,
    pub y: f64,
    pub s: f64,
    pub lat: f64,
    pub v: f64,
    pub a: f64,
    pub h: f64,
    pub le: f64,
    pub wi: f64,
    pub he: f64,
    pub ty: VehicleType,
    pub co: Color,
    pub ln: String,
    pub lx: usize,
    pub rd: String,
    pub sg: Signal,
    pub ds: String,
}

impl ObjectInfo {
    pub fn from_agent(agent: &VehicleAgent, ts: f64, sensor: &str) -> Self {
        Self {
            id: agent.id.clone(),
            ts,
            x: agent.x,
            y: agent.y,
            s: agent.s,
            lat: agent.lateral,
            v: agent.speed,
            a: agent.accel,
            h: agent.heading,
            le: agent.length,
            wi: agent.width,
            he: agent.height,
            ty: agent.vtype,
            co: agent.color,
            ln: agent.lane.clone(),
            lx: agent.lane_index,
            rd: agent.road.clone(),
            sg: agent.signal,
            ds: sensor.to_string(),
        }
    }

    pub fn is_av(&self) -> bool {
        self.id.starts_with("AV")
    }

    pub fn distance_to(&self, other: &ObjectInfo) -> f64 {
        (other.x - self.x).hypot(other.y - self.y)
    }

    pub fn is_finite(&self) -> bool {
        [
            self.ts, self.x, self.y, self.s, self.lat, self.v, self.a, self.h, self.le, self.wi,
            self.he,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SensorKind {
    Av { range: f64 },
    Rsu { coverage: Vec<LaneSection> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: SensorKind,
}

#[derive(Debug, Error, PartialEq)]
pub enum PerceptionError {
    #[error("ego {0} is not in the snapshot")]
    MissingEgo(String),
    #[error("sensor {0} has the wrong kind for this model")]
    WrongKind(String),
    #[error("sensor {0}: {1}")]
    InvalidSpec(String, String),
}

impl SensorSpec {
    pub fn av(id: impl Into<String>, range: f64) -> Self {
        Self {
            id: id.into(),
            kind: SensorKind::Av { range },
        }
    }

    pub fn rsu(id: impl Into<String>, coverage: Vec<LaneSection>) -> Self {
        Self {
            id: id.into(),
            kind: SensorKind::Rsu { coverage },
        }
    }

    pub fn validate(&self) -> Result<(), PerceptionError> {
        if self.id.is_empty() {
            return Err(PerceptionError::InvalidSpec(self.id.clone(), "empty id".into()));
        }
        match &self.kind {
            SensorKind::Av { range } if !(*range > 0.0) => Err(PerceptionError::InvalidSpec(
                self.id.clone(),
                "range must be positive".into(),
            )),
            SensorKind::Rsu { coverage } if coverage.is_empty() => Err(
                PerceptionError::InvalidSpec(self.id.clone(), "empty coverage".into()),
            ),
            _ => Ok(()),
        }
    }
}

/// Records seen by an AV's onboard sensor: every object within `range` of the
/// ego (inclusive), plus the ego's own record.
pub fn perceive_av(
    snapshot: &Snapshot,
    ego_id: &str,
    spec: &SensorSpec,
) -> Result<Vec<ObjectInfo>, PerceptionError> {
    let SensorKind::Av { range } = spec.kind else {
        return Err(PerceptionError::WrongKind(spec.id.clone()));
    };
    let ego = snapshot
        .agent(ego_id)
        .ok_or_else(|| PerceptionError::MissingEgo(ego_id.to_string()))?;
    Ok(snapshot
        .agents
        .iter()
        .filter(|o| o.id == ego.id || (o.x - ego.x).hypot(o.y - ego.y) <= range)
        .map(|o| ObjectInfo::from_agent(o, snapshot.t, &spec.id))
        .collect())
}

/// Records seen by a roadside unit: every object whose `(lane, s)` lies in a
/// covered lane section.
pub fn perceive_rsu(
    snapshot: &Snapshot,
    spec: &SensorSpec,
) -> Result<Vec<ObjectInfo>, PerceptionError> {
    let SensorKind::Rsu { coverage } = &spec.kind else {
        return Err(PerceptionError::WrongKind(spec.id.clone()));
    };
    Ok(snapshot
        .agents
        .iter()
        .filter(|o| coverage.iter().any(|sec| sec.contains(&o.lane, o.s)))
        .map(|o| ObjectInfo::from_agent(o, snapshot.t, &spec.id))
        .collect())
}

/// Sensor layout: one onboard sensor per AV plus the network's roadside units.
pub fn default_sensors(network: &RoadNetwork, av_ids: &[String], av_range: f64) -> Vec<SensorSpec> {
    let mut sensors: Vec<SensorSpec> = av_ids.iter().map(|id| SensorSpec::av(id.clone(), av_range)).collect();
    sensors.extend(
        network
            .rsu_coverages
            .iter()
            .map(|(id, cov)| SensorSpec::rsu(id.clone(), cov.clone())),
    );
    sensors
}
