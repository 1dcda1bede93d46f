//! Static road network: roads, ordered lanes, RSU-covered lane sections and
//! projection between world `(x, y)` and lane `(s, lateral)` coordinates.
//!
//! Lane index 0 is the rightmost lane of a road; indices grow leftward with
//! respect to the driving direction (the direction of the centerline). A
//! positive lateral offset therefore points toward higher lane indices.
//!
//! Headings are degrees clockwise from north (+y), in `[0, 360)`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The canonical two-road test map shipped with the crate.
pub const NET_CROSS_JSON: &str = include_str!("../fixtures/net_cross.json");

#[derive(Debug, Error)]
pub enum MapError {
    #[error("failed to read network file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("network parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("road {road}: non-contiguous lane indices {indices:?}")]
    NonContiguousLanes { road: String, indices: Vec<usize> },
    #[error("duplicate road id {0}")]
    DuplicateRoad(String),
    #[error("duplicate lane name {0}")]
    DuplicateLane(String),
    #[error("lane {lane}: {reason}")]
    InvalidLane { lane: String, reason: String },
    #[error("rsu {rsu}: {reason}")]
    InvalidCoverage { rsu: String, reason: String },
    #[error("unknown lane {road}/{index}")]
    UnknownLane { road: String, index: usize },
    #[error("point is too far from centerline of lane {lane} ({distance:.3} m > {limit:.3} m)")]
    TooFar {
        lane: String,
        distance: f64,
        limit: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lane {
    pub road_id: String,
    pub index: usize,
    pub name: String,
    pub centerline: Vec<[f64; 2]>,
    pub width: f64,
    pub length: f64,
    /// Cumulative arc length at each centerline vertex.
    cumulative: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Road {
    pub id: String,
    /// Optional human-readable name ("Main Street").
    pub name: Option<String>,
    pub lanes: Vec<Lane>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneSection {
    /// Lane name.
    pub lane: String,
    pub s_range: [f64; 2],
}

impl LaneSection {
    pub fn contains(&self, lane: &str, s: f64) -> bool {
        self.lane == lane && s >= self.s_range[0] && s <= self.s_range[1]
    }
}

/// Immutable after load; share it behind an `Arc`.
#[derive(Debug, Clone)]
pub struct RoadNetwork {
    pub roads: Vec<Road>,
    pub rsu_coverages: BTreeMap<String, Vec<LaneSection>>,
    lane_lookup: HashMap<String, (usize, usize)>,
}

#[derive(Deserialize, Serialize)]
struct RawNetwork {
    roads: Vec<RawRoad>,
    #[serde(default)]
    rsu_coverages: BTreeMap<String, Vec<LaneSection>>,
}

#[derive(Deserialize, Serialize)]
struct RawRoad {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    lanes: Vec<RawLane>,
}

#[derive(Deserialize, Serialize)]
struct RawLane {
    index: usize,
    name: String,
    width: f64,
    centerline: Vec<[f64; 2]>,
}

impl Lane {
    pub fn new(
        road_id: impl Into<String>,
        index: usize,
        name: impl Into<String>,
        width: f64,
        centerline: Vec<[f64; 2]>,
    ) -> Result<Self, MapError> {
        let name = name.into();
        let invalid = |reason: &str| MapError::InvalidLane {
            lane: name.clone(),
            reason: reason.to_string(),
        };
        if centerline.len() < 2 {
            return Err(invalid("centerline needs at least 2 points"));
        }
        if !(width > 0.0) || !width.is_finite() {
            return Err(invalid("width must be positive"));
        }
        if centerline.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("centerline has non-finite coordinates"));
        }
        let mut cumulative = Vec::with_capacity(centerline.len());
        let mut acc = 0.0;
        cumulative.push(0.0);
        for w in centerline.windows(2) {
            let seg = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            if seg <= 0.0 {
                return Err(invalid("centerline has a zero-length segment"));
            }
            acc += seg;
            cumulative.push(acc);
        }
        Ok(Self {
            road_id: road_id.into(),
            index,
            name,
            centerline,
            width,
            length: acc,
            cumulative,
        })
    }

    fn segment_at(&self, s: f64) -> usize {
        let last = self.centerline.len() - 2;
        match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&s).unwrap_or(std::cmp::Ordering::Less))
        {
            Ok(i) => i.min(last),
            Err(i) => i.saturating_sub(1).min(last),
        }
    }

    fn unit_tangent(&self, seg: usize) -> (f64, f64) {
        let a = self.centerline[seg];
        let b = self.centerline[seg + 1];
        let len = self.cumulative[seg + 1] - self.cumulative[seg];
        ((b[0] - a[0]) / len, (b[1] - a[1]) / len)
    }

    /// World point at arc length `s` (clamped to the lane) and signed lateral offset.
    pub fn point_at(&self, s: f64, lateral: f64) -> (f64, f64) {
        let s = s.clamp(0.0, self.length);
        let seg = self.segment_at(s);
        let (tx, ty) = self.unit_tangent(seg);
        let a = self.centerline[seg];
        let along = s - self.cumulative[seg];
        // Left normal of (tx, ty) is (-ty, tx).
        (
            a[0] + tx * along - ty * lateral,
            a[1] + ty * along + tx * lateral,
        )
    }

    /// Tangent heading at `s`, degrees clockwise from north.
    pub fn heading_at(&self, s: f64) -> f64 {
        let seg = self.segment_at(s.clamp(0.0, self.length));
        let (tx, ty) = self.unit_tangent(seg);
        normalize_heading(tx.atan2(ty).to_degrees())
    }

    /// Nearest-point projection onto the centerline: `(s, lateral, distance)`.
    pub fn nearest(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let mut best = (0.0, 0.0, f64::INFINITY);
        for seg in 0..self.centerline.len() - 1 {
            let a = self.centerline[seg];
            let (tx, ty) = self.unit_tangent(seg);
            let seg_len = self.cumulative[seg + 1] - self.cumulative[seg];
            let (dx, dy) = (x - a[0], y - a[1]);
            let along = (dx * tx + dy * ty).clamp(0.0, seg_len);
            let (fx, fy) = (a[0] + tx * along, a[1] + ty * along);
            let dist = (x - fx).hypot(y - fy);
            if dist < best.2 {
                // cross(t, p - foot) is positive on the left of travel.
                let lateral = tx * (y - fy) - ty * (x - fx);
                best = (self.cumulative[seg] + along, lateral, dist);
            }
        }
        best
    }
}

/// Wraps an angle in degrees to `[0, 360)`.
pub fn normalize_heading(h: f64) -> f64 {
    let r = h.rem_euclid(360.0);
    if r >= 360.0 {
        0.0
    } else {
        r
    }
}

impl RoadNetwork {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, MapError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| MapError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// The shipped `net_cross.json` map.
    pub fn net_cross() -> Self {
        Self::from_json(NET_CROSS_JSON).expect("shipped network fixture is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, MapError> {
        let raw: RawNetwork = serde_json::from_str(text)?;
        let mut roads = Vec::with_capacity(raw.roads.len());
        for r in raw.roads {
            let mut lanes = r
                .lanes
                .into_iter()
                .map(|l| Lane::new(r.id.clone(), l.index, l.name, l.width, l.centerline))
                .collect::<Result<Vec<_>, _>>()?;
            lanes.sort_by_key(|l| l.index);
            roads.push(Road {
                id: r.id,
                name: r.name,
                lanes,
            });
        }
        Self::new(roads, raw.rsu_coverages)
    }

    pub fn new(
        roads: Vec<Road>,
        rsu_coverages: BTreeMap<String, Vec<LaneSection>>,
    ) -> Result<Self, MapError> {
        let mut lane_lookup = HashMap::new();
        let mut road_ids = std::collections::HashSet::new();
        for (ri, road) in roads.iter().enumerate() {
            if !road_ids.insert(road.id.as_str()) {
                return Err(MapError::DuplicateRoad(road.id.clone()));
            }
            let indices: Vec<usize> = road.lanes.iter().map(|l| l.index).collect();
            if road.lanes.is_empty() || indices.iter().enumerate().any(|(i, &x)| i != x) {
                return Err(MapError::NonContiguousLanes {
                    road: road.id.clone(),
                    indices,
                });
            }
            for (li, lane) in road.lanes.iter().enumerate() {
                if lane.road_id != road.id {
                    return Err(MapError::InvalidLane {
                        lane: lane.name.clone(),
                        reason: format!("road_id {} does not match road {}", lane.road_id, road.id),
                    });
                }
                if lane_lookup.insert(lane.name.clone(), (ri, li)).is_some() {
                    return Err(MapError::DuplicateLane(lane.name.clone()));
                }
            }
        }
        let net = Self {
            roads,
            rsu_coverages,
            lane_lookup,
        };
        for (rsu, sections) in &net.rsu_coverages {
            if sections.is_empty() {
                return Err(MapError::InvalidCoverage {
                    rsu: rsu.clone(),
                    reason: "empty coverage".into(),
                });
            }
            for sec in sections {
                let lane = net.lane(&sec.lane).ok_or_else(|| MapError::InvalidCoverage {
                    rsu: rsu.clone(),
                    reason: format!("unknown lane {}", sec.lane),
                })?;
                let [a, b] = sec.s_range;
                if !(0.0 <= a && a < b && b <= lane.length + 1e-9) {
                    return Err(MapError::InvalidCoverage {
                        rsu: rsu.clone(),
                        reason: format!(
                            "s_range [{a}, {b}] not within lane {} of length {:.3}",
                            sec.lane, lane.length
                        ),
                    });
                }
            }
        }
        Ok(net)
    }

    pub fn road(&self, id: &str) -> Option<&Road> {
        self.roads.iter().find(|r| r.id == id)
    }

    pub fn lane(&self, name: &str) -> Option<&Lane> {
        self.lane_lookup
            .get(name)
            .map(|&(r, l)| &self.roads[r].lanes[l])
    }

    pub fn lane_by_index(&self, road_id: &str, index: usize) -> Result<&Lane, MapError> {
        self.road(road_id)
            .and_then(|r| r.lanes.get(index))
            .ok_or_else(|| MapError::UnknownLane {
                road: road_id.to_string(),
                index,
            })
    }

    pub fn lanes(&self) -> impl Iterator<Item = &Lane> {
        self.roads.iter().flat_map(|r| r.lanes.iter())
    }

    pub fn lane_count(&self) -> usize {
        self.lane_lookup.len()
    }

    /// Resolves a road by id or by its display name (case-insensitive).
    pub fn resolve_road(&self, key: &str) -> Option<&Road> {
        let key = key.trim();
        self.road(key).or_else(|| {
            self.roads.iter().find(|r| {
                r.id.eq_ignore_ascii_case(key)
                    || r.name.as_deref().is_some_and(|n| n.eq_ignore_ascii_case(key))
            })
        })
    }

    /// `(name, id)` pairs for roads that carry a display name.
    pub fn road_aliases(&self) -> Vec<(String, String)> {
        self.roads
            .iter()
            .filter_map(|r| r.name.clone().map(|n| (n, r.id.clone())))
            .collect()
    }

    /// Projects a world point onto a lane, giving `(s, lateral)`.
    ///
    /// Fails when the point is more than twice the lane width from the centerline.
    pub fn project(
        &self,
        road_id: &str,
        lane_index: usize,
        x: f64,
        y: f64,
    ) -> Result<(f64, f64), MapError> {
        let lane = self.lane_by_index(road_id, lane_index)?;
        let (s, lateral, distance) = lane.nearest(x, y);
        let limit = 2.0 * lane.width;
        if distance > limit {
            return Err(MapError::TooFar {
                lane: lane.name.clone(),
                distance,
                limit,
            });
        }
        Ok((s, lateral))
    }

    pub fn to_json(&self) -> String {
        let raw = RawNetwork {
            roads: self
                .roads
                .iter()
                .map(|r| RawRoad {
                    id: r.id.clone(),
                    name: r.name.clone(),
                    lanes: r
                        .lanes
                        .iter()
                        .map(|l| RawLane {
                            index: l.index,
                            name: l.name.clone(),
                            width: l.width,
                            centerline: l.centerline.clone(),
                        })
                        .collect(),
                })
                .collect(),
            rsu_coverages: self.rsu_coverages.clone(),
        };
        serde_json::to_string_pretty(&raw).expect("network serializes")
    }
}
