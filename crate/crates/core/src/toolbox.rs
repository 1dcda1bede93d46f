//! Deterministic spatial query operators: a task id plus query parameters
//! select objects from a scene and project the requested quantity.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::LinguisticScene;
use crate::perception::ObjectInfo;
use crate::scene_graph::{lane_relation, spatial_relation_between, Relation, RELATION_RADIUS};
use crate::vocab::{Color, VehicleType};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToolboxError {
    #[error("unknown ego {0}")]
    UnknownEgo(String),
    #[error("task id {0} is outside 1..=10")]
    InvalidTask(i64),
    #[error("relation road needs a road name")]
    MissingRoad,
    #[error("unknown relation {0:?}")]
    UnknownRelation(String),
}

/// The ten query tasks, numbered 1..=10 on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub enum TaskId {
    Velocity = 1,
    Acceleration = 2,
    Heading = 3,
    Color = 4,
    Classification = 5,
    Size = 6,
    Status = 7,
    Distance = 8,
    Count = 9,
    Existence = 10,
}

impl TaskId {
    pub const ALL: [TaskId; 10] = [
        TaskId::Velocity,
        TaskId::Acceleration,
        TaskId::Heading,
        TaskId::Color,
        TaskId::Classification,
        TaskId::Size,
        TaskId::Status,
        TaskId::Distance,
        TaskId::Count,
        TaskId::Existence,
    ];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn from_number(n: i64) -> Result<Self, ToolboxError> {
        if (1..=10).contains(&n) {
            Ok(Self::ALL[n as usize - 1])
        } else {
            Err(ToolboxError::InvalidTask(n))
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Velocity => "velocity",
            TaskId::Acceleration => "acceleration",
            TaskId::Heading => "heading",
            TaskId::Color => "color",
            TaskId::Classification => "classification",
            TaskId::Size => "size",
            TaskId::Status => "status",
            TaskId::Distance => "distance",
            TaskId::Count => "count",
            TaskId::Existence => "existence",
        }
    }

    /// Object-record field the task reads, if it is an attribute query.
    pub fn attribute(self) -> Option<&'static str> {
        Some(match self {
            TaskId::Velocity => "v",
            TaskId::Acceleration => "a",
            TaskId::Heading => "h",
            TaskId::Color => "co",
            TaskId::Classification => "ty",
            TaskId::Size => "le",
            TaskId::Status => "sg",
            _ => return None,
        })
    }

    /// Count and existence produce one scalar regardless of the selection.
    pub fn is_aggregate(self) -> bool {
        matches!(self, TaskId::Count | TaskId::Existence)
    }

    pub fn index(self) -> usize {
        self as usize - 1
    }
}

impl TryFrom<i64> for TaskId {
    type Error = ToolboxError;
    fn try_from(n: i64) -> Result<Self, Self::Error> {
        Self::from_number(n)
    }
}

impl From<TaskId> for i64 {
    fn from(t: TaskId) -> i64 {
        t as i64
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Attribute and relation constraints for a query.
///
/// Wire form is flat: `{"vtype":..,"color":..,"relation":..,"road":..}`
/// with nulls allowed. A missing relation defaults to `surrounding`, or to
/// `road` when only a road is given.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "ParamsWire", into = "ParamsWire")]
pub struct QueryParams {
    pub vtype: Option<VehicleType>,
    pub color: Option<Color>,
    pub relation: Relation,
}

impl Default for QueryParams {
    fn default() -> Self {
        Self {
            vtype: None,
            color: None,
            relation: Relation::Surrounding,
        }
    }
}

impl QueryParams {
    pub fn road(&self) -> Option<&str> {
        match &self.relation {
            Relation::Road(r) => Some(r),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamsWire {
    #[serde(default)]
    vtype: Option<VehicleType>,
    #[serde(default)]
    color: Option<Color>,
    #[serde(default)]
    relation: Option<String>,
    #[serde(default)]
    road: Option<String>,
}

impl TryFrom<ParamsWire> for QueryParams {
    type Error = ToolboxError;
    fn try_from(w: ParamsWire) -> Result<Self, Self::Error> {
        let road = w.road.filter(|r| !r.trim().is_empty());
        let relation = match w.relation.as_deref().map(str::trim) {
            None | Some("") if road.is_some() => Relation::Road(road.unwrap().trim().to_string()),
            None => Relation::Surrounding,
            Some(kw) => match Relation::from_keyword(kw, road.as_deref()) {
                Some(r) => r,
                None if kw.eq_ignore_ascii_case("road") => return Err(ToolboxError::MissingRoad),
                None => return Err(ToolboxError::UnknownRelation(kw.to_string())),
            },
        };
        Ok(Self {
            vtype: w.vtype,
            color: w.color,
            relation,
        })
    }
}

impl From<QueryParams> for ParamsWire {
    fn from(p: QueryParams) -> Self {
        let road = p.road().map(str::to_string);
        Self {
            vtype: p.vtype,
            color: p.color,
            relation: Some(p.relation.keyword().to_string()),
            road,
        }
    }
}

/// One result component: a scalar, or a `(le, wi, he)` triple for size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Reading {
    Scalar(f64),
    Triple([f64; 3]),
}

impl Reading {
    pub fn components(&self) -> &[f64] {
        match self {
            Reading::Scalar(v) => std::slice::from_ref(v),
            Reading::Triple(t) => t,
        }
    }
}

/// Numeric query result. Values follow ascending ego distance (ties by id);
/// count and existence carry a single scalar while `matched_ids` still lists
/// the selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct NumericResult {
    pub values: Vec<Reading>,
    pub matched_ids: Vec<String>,
}

/// A selected object with its distance to the ego (`None` for road queries
/// without an ego in the scene).
#[derive(Debug, Clone, Copy)]
pub struct Selected<'a> {
    pub object: &'a ObjectInfo,
    pub distance: Option<f64>,
}

pub fn select_objects<'a>(
    ls: &'a LinguisticScene,
    ego_id: &str,
    p: &QueryParams,
) -> Result<Vec<Selected<'a>>, ToolboxError> {
    let ego = ls.object(ego_id);
    let road_query = matches!(p.relation, Relation::Road(_));
    if ego.is_none() && !road_query {
        return Err(ToolboxError::UnknownEgo(ego_id.to_string()));
    }
    let mut out: Vec<Selected<'a>> = ls
        .objects
        .iter()
        .filter(|o| o.id != ego_id)
        .filter(|o| p.vtype.is_none_or(|t| o.ty == t))
        .filter(|o| p.color.is_none_or(|c| o.co == c))
        .filter_map(|o| {
            let distance = ego.map(|e| e.distance_to(o));
            let keep = match (&p.relation, ego) {
                (Relation::Road(r), _) => &o.rd == r,
                (_, None) => false,
                (rel, Some(e)) => {
                    distance.unwrap() <= RELATION_RADIUS
                        && match rel {
                            Relation::Surrounding => true,
                            Relation::Spatial(s) => spatial_relation_between(e, o) == *s,
                            Relation::Lane(l) => lane_relation(e, o) == Some(*l),
                            Relation::Road(_) => unreachable!(),
                        }
                }
            };
            keep.then_some(Selected { object: o, distance })
        })
        .collect();
    out.sort_by(|a, b| {
        let da = a.distance.unwrap_or(0.0);
        let db = b.distance.unwrap_or(0.0);
        da.total_cmp(&db).then_with(|| a.object.id.cmp(&b.object.id))
    });
    Ok(out)
}

pub fn project(task: TaskId, s: &Selected) -> Reading {
    let o = s.object;
    match task {
        TaskId::Velocity => Reading::Scalar(o.v),
        TaskId::Acceleration => Reading::Scalar(o.a),
        TaskId::Heading => Reading::Scalar(o.h),
        TaskId::Color => Reading::Scalar(o.co.code() as f64),
        TaskId::Classification => Reading::Scalar(o.ty.code() as f64),
        TaskId::Size => Reading::Triple([o.le, o.wi, o.he]),
        TaskId::Status => Reading::Scalar(o.sg.code() as f64),
        TaskId::Distance => Reading::Scalar(s.distance.unwrap_or(f64::NAN)),
        TaskId::Count | TaskId::Existence => unreachable!("aggregate task"),
    }
}

pub fn execute(
    task: TaskId,
    p: &QueryParams,
    ls: &LinguisticScene,
    ego_id: &str,
) -> Result<NumericResult, ToolboxError> {
    let selected = select_objects(ls, ego_id, p)?;
    if task == TaskId::Distance && ls.object(ego_id).is_none() {
        return Err(ToolboxError::UnknownEgo(ego_id.to_string()));
    }
    let matched_ids = selected.iter().map(|s| s.object.id.clone()).collect();
    let values = match task {
        TaskId::Count => vec![Reading::Scalar(selected.len() as f64)],
        TaskId::Existence => vec![Reading::Scalar(if selected.is_empty() { 0.0 } else { 1.0 })],
        _ => selected.iter().map(|s| project(task, s)).collect(),
    };
    Ok(NumericResult { values, matched_ids })
}
