//! Ego-centric relations and graphs.
//!
//! The direction angle between an ego `e` and an object `o` is the angle
//! between the ego's heading vector `(sin h, cos h)` and the displacement
//! `o - e`. Its magnitude comes from the arccos of the normalized dot
//! product; its sign is the sign of `sin h * dy - cos h * dx`, positive on
//! the ego's left. Headings are degrees clockwise from north.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::LinguisticScene;
use crate::perception::ObjectInfo;

/// Spatial limit on ego-centric relations, meters (inclusive).
pub const RELATION_RADIUS: f64 = 100.0;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("coincident positions: direction undefined")]
    Coincident,
    #[error("unknown ego {0}")]
    UnknownEgo(String),
    #[error("{0} is not an autonomous vehicle")]
    NotAv(String),
    #[error("entity {0} is not in the graph")]
    UnknownEntity(String),
    #[error("entity {entity} has no attribute {attribute}")]
    UnknownAttribute { entity: String, attribute: String },
    #[error("graph has no entities to mask")]
    NothingToMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialRelation {
    Front,
    Rear,
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LaneRelation {
    LeftLane,
    RightLane,
    SameLane,
}

/// Any relation a query or a graph edge can carry.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    Spatial(SpatialRelation),
    Lane(LaneRelation),
    Road(String),
    Surrounding,
}

impl Relation {
    pub const FRONT: Relation = Relation::Spatial(SpatialRelation::Front);
    pub const REAR: Relation = Relation::Spatial(SpatialRelation::Rear);
    pub const LEFT: Relation = Relation::Spatial(SpatialRelation::Left);
    pub const RIGHT: Relation = Relation::Spatial(SpatialRelation::Right);
    pub const LEFT_LANE: Relation = Relation::Lane(LaneRelation::LeftLane);
    pub const RIGHT_LANE: Relation = Relation::Lane(LaneRelation::RightLane);
    pub const SAME_LANE: Relation = Relation::Lane(LaneRelation::SameLane);

    /// Kind keyword used on the wire (`front`, `leftlane`, `road`, ...).
    pub fn keyword(&self) -> &'static str {
        match self {
            Relation::Spatial(SpatialRelation::Front) => "front",
            Relation::Spatial(SpatialRelation::Rear) => "rear",
            Relation::Spatial(SpatialRelation::Left) => "left",
            Relation::Spatial(SpatialRelation::Right) => "right",
            Relation::Lane(LaneRelation::LeftLane) => "leftlane",
            Relation::Lane(LaneRelation::RightLane) => "rightlane",
            Relation::Lane(LaneRelation::SameLane) => "samelane",
            Relation::Road(_) => "road",
            Relation::Surrounding => "surrounding",
        }
    }

    /// Parses a kind keyword; `road` needs the road name.
    pub fn from_keyword(kw: &str, road: Option<&str>) -> Option<Relation> {
        let kw = kw.trim().to_ascii_lowercase().replace([' ', '_', '-'], "");
        Some(match kw.as_str() {
            "front" => Relation::FRONT,
            "rear" => Relation::REAR,
            "left" => Relation::LEFT,
            "right" => Relation::RIGHT,
            "leftlane" => Relation::LEFT_LANE,
            "rightlane" => Relation::RIGHT_LANE,
            "samelane" => Relation::SAME_LANE,
            "surrounding" | "" => Relation::Surrounding,
            "road" => Relation::Road(road?.trim().to_string()),
            _ => return None,
        })
    }

    pub fn is_ego_agnostic(&self) -> bool {
        matches!(self, Relation::Road(_))
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Relation::Road(name) => write!(f, "road({name})"),
            other => f.write_str(other.keyword()),
        }
    }
}

/// Signed direction angle from ego `e` to object `o`, degrees in `(-180, 180]`.
pub fn direction_angle(e: &ObjectInfo, o: &ObjectInfo) -> Result<f64, GraphError> {
    let (dx, dy) = (o.x - e.x, o.y - e.y);
    let dist = dx.hypot(dy);
    if dist == 0.0 {
        return Err(GraphError::Coincident);
    }
    let (sin_h, cos_h) = e.h.to_radians().sin_cos();
    let cos_theta = ((dx * sin_h + dy * cos_h) / dist).clamp(-1.0, 1.0);
    let magnitude = cos_theta.acos().to_degrees();
    let cross = sin_h * dy - cos_h * dx;
    Ok(if cross < 0.0 { -magnitude } else { magnitude })
}

/// Bins a direction angle into front/left/rear/right with half-open bounds
/// `(-45, 45]`, `(45, 135]`, `(135, 180] ∪ (-180, -135]`, `(-135, -45]`.
pub fn spatial_relation(theta: f64) -> SpatialRelation {
    if theta > -45.0 && theta <= 45.0 {
        SpatialRelation::Front
    } else if theta > 45.0 && theta <= 135.0 {
        SpatialRelation::Left
    } else if theta > -135.0 && theta <= -45.0 {
        SpatialRelation::Right
    } else {
        SpatialRelation::Rear
    }
}

/// Spatial relation of `o` seen from `e`. Coincident positions count as front.
pub fn spatial_relation_between(e: &ObjectInfo, o: &ObjectInfo) -> SpatialRelation {
    direction_angle(e, o).map_or(SpatialRelation::Front, spatial_relation)
}

/// Lane topology relation, applied literally on lane indices.
pub fn lane_relation(e: &ObjectInfo, o: &ObjectInfo) -> Option<LaneRelation> {
    if e.rd != o.rd {
        return None;
    }
    let diff = e.lx as i64 - o.lx as i64;
    match diff {
        1 => Some(LaneRelation::LeftLane),
        -1 => Some(LaneRelation::RightLane),
        0 => Some(LaneRelation::SameLane),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub object: ObjectInfo,
    pub spatial: SpatialRelation,
    pub lane: Option<LaneRelation>,
    /// Road the object drives on.
    pub road: String,
    pub distance: f64,
}

impl Edge {
    pub fn relations(&self) -> Vec<Relation> {
        let mut out = vec![Relation::Spatial(self.spatial)];
        out.extend(self.lane.map(Relation::Lane));
        out.push(Relation::Road(self.road.clone()));
        out
    }

    pub fn has_relation(&self, rel: &Relation) -> bool {
        match rel {
            Relation::Spatial(s) => self.spatial == *s,
            Relation::Lane(l) => self.lane == Some(*l),
            Relation::Road(r) => &self.road == r,
            Relation::Surrounding => true,
        }
    }
}

/// Ego-centric entity-relation graph; edges are ordered by distance, then id.
#[derive(Debug, Clone, PartialEq)]
pub struct ERGraph {
    pub scene_id: u64,
    pub ego: ObjectInfo,
    pub edges: Vec<Edge>,
}

impl ERGraph {
    pub fn edge(&self, id: &str) -> Option<&Edge> {
        self.edges.iter().find(|e| e.object.id == id)
    }
}

pub fn build_graph(ls: &LinguisticScene, ego_id: &str) -> Result<ERGraph, GraphError> {
    if !ego_id.starts_with("AV") {
        return Err(GraphError::NotAv(ego_id.to_string()));
    }
    let ego = ls
        .object(ego_id)
        .ok_or_else(|| GraphError::UnknownEgo(ego_id.to_string()))?;
    let mut edges: Vec<Edge> = ls
        .objects
        .iter()
        .filter(|o| o.id != ego.id)
        .filter_map(|o| {
            let distance = ego.distance_to(o);
            (distance <= RELATION_RADIUS).then(|| Edge {
                spatial: spatial_relation_between(ego, o),
                lane: lane_relation(ego, o),
                road: o.rd.clone(),
                distance,
                object: o.clone(),
            })
        })
        .collect();
    edges.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then_with(|| a.object.id.cmp(&b.object.id))
    });
    Ok(ERGraph {
        scene_id: ls.scene_id,
        ego: ego.clone(),
        edges,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Int(i64),
    Num(f64),
    Text(String),
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttrValue::Int(v) => write!(f, "{v}"),
            AttrValue::Num(v) => write!(f, "{v}"),
            AttrValue::Text(v) => f.write_str(v),
        }
    }
}

/// Object-record field names that can be attached as attributes.
pub const ATTRIBUTE_NAMES: &[&str] = &[
    "id", "ts", "x", "y", "s", "lat", "v", "a", "h", "le", "wi", "he", "ty", "co", "ln", "lx",
    "rd", "sg", "ds",
];

/// Attributes that questions ask about.
pub const QUERYABLE_ATTRIBUTES: &[&str] = &["v", "a", "h", "co", "ty", "le", "wi", "he", "sg"];

pub fn attributes_of(o: &ObjectInfo) -> BTreeMap<&'static str, AttrValue> {
    use AttrValue::*;
    BTreeMap::from([
        ("id", Text(o.id.clone())),
        ("ts", Num(o.ts)),
        ("x", Num(o.x)),
        ("y", Num(o.y)),
        ("s", Num(o.s)),
        ("lat", Num(o.lat)),
        ("v", Num(o.v)),
        ("a", Num(o.a)),
        ("h", Num(o.h)),
        ("le", Num(o.le)),
        ("wi", Num(o.wi)),
        ("he", Num(o.he)),
        ("ty", Text(o.ty.to_string())),
        ("co", Text(o.co.to_string())),
        ("ln", Text(o.ln.clone())),
        ("lx", Int(o.lx as i64)),
        ("rd", Text(o.rd.clone())),
        ("sg", Text(o.sg.to_string())),
        ("ds", Text(o.ds.clone())),
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub enum MaskSpec {
    Fixed { entity: String, attribute: String },
    /// Uniform over (edge entity, queryable attribute).
    Random { seed: u64 },
}

/// Attribute-entity-relation graph: the ER graph plus per-entity attributes
/// with one attribute masked as the query target.
#[derive(Debug, Clone, PartialEq)]
pub struct AERGraph {
    pub base: ERGraph,
    pub attributes: BTreeMap<String, BTreeMap<&'static str, AttrValue>>,
    pub masked: (String, String),
}

impl AERGraph {
    /// Ground truth for the masked attribute.
    pub fn masked_value(&self) -> &AttrValue {
        let (entity, attr) = &self.masked;
        &self.attributes[entity][attr.as_str()]
    }

    pub fn masked_edge(&self) -> Option<&Edge> {
        self.base.edge(&self.masked.0)
    }
}

pub fn build_aer(g: &ERGraph, mask: MaskSpec) -> Result<AERGraph, GraphError> {
    let mut attributes = BTreeMap::new();
    attributes.insert(g.ego.id.clone(), attributes_of(&g.ego));
    for e in &g.edges {
        attributes.insert(e.object.id.clone(), attributes_of(&e.object));
    }
    let masked = match mask {
        MaskSpec::Fixed { entity, attribute } => {
            let attrs = attributes
                .get(&entity)
                .ok_or_else(|| GraphError::UnknownEntity(entity.clone()))?;
            if !attrs.contains_key(attribute.as_str()) {
                return Err(GraphError::UnknownAttribute { entity, attribute });
            }
            (entity, attribute)
        }
        MaskSpec::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let edge = g.edges.choose(&mut rng).ok_or(GraphError::NothingToMask)?;
            let attr = QUERYABLE_ATTRIBUTES.choose(&mut rng).unwrap();
            (edge.object.id.clone(), attr.to_string())
        }
    };
    Ok(AERGraph {
        base: g.clone(),
        attributes,
        masked,
    })
}
