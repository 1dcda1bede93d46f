//! Deterministic kinematic traffic on a [`RoadNetwork`].
//!
//! Each agent follows a route of lane segments on one road. Longitudinal
//! control is a simple car-following rule:
//!
//! * free road: `a = A_MAX * (1 - (v / v_des)^4)`
//! * leader ahead with bumper gap `g`: relax toward the speed that keeps a
//!   2 s time headway, `v_hw = (g - MIN_GAP) / 2`, and never exceed the speed
//!   from which the follower can still stop behind a leader braking at
//!   `MAX_DECEL`
//! * the commanded acceleration is clamped to `[-4.5, A_MAX]` m/s².
//!
//! Lane changes are announced: the turn signal goes on when the agent reaches
//! the end of a route segment, the change happens no earlier than 2 s later
//! (once the target lane has room) and the signal is cleared right after.
//! Agents leaving the end of their lane are respawned on a fresh route.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::road::{Lane, RoadNetwork};
use crate::vocab::{Color, Signal, VehicleType};

pub const MAX_DECEL: f64 = 4.5;
pub const A_MAX: f64 = 2.0;
pub const TIME_HEADWAY: f64 = 2.0;
/// Standstill bumper gap the following rule aims for.
pub const MIN_GAP: f64 = 2.0;
/// Hard floor on the bumper gap between consecutive agents on a lane.
pub const SAFETY_GAP: f64 = 0.5;
pub const SIGNAL_LEAD_TIME: f64 = 2.0;
/// Decelerations stronger than this light the brake signal.
pub const BRAKE_SIGNAL_DECEL: f64 = 1.5;
const HEADWAY_RELAX: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid sim config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    /// Integration step in seconds.
    pub dt: f64,
    pub vehicle_count: usize,
    /// The first `av_count` agents are autonomous (`AV001`, `AV002`, ...).
    pub av_count: usize,
    /// Total simulated time in seconds.
    pub duration: f64,
    pub type_weights: BTreeMap<VehicleType, f64>,
    pub color_weights: BTreeMap<Color, f64>,
    /// Probability that a spawned route contains a lane change.
    pub lane_change_prob: f64,
    /// Spacing of initial spawn slots along each lane, meters.
    pub spawn_spacing: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            dt: 0.2,
            vehicle_count: 60,
            av_count: 8,
            duration: 600.0,
            type_weights: [
                (VehicleType::Car, 0.6),
                (VehicleType::Truck, 0.15),
                (VehicleType::Bus, 0.1),
                (VehicleType::Motorcycle, 0.15),
            ]
            .into_iter()
            .collect(),
            color_weights: Color::ALL.iter().map(|c| (*c, 1.0)).collect(),
            lane_change_prob: 0.4,
            spawn_spacing: 25.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad("dt must be positive");
        }
        if self.av_count > self.vehicle_count {
            return bad("av_count exceeds vehicle_count");
        }
        if !(self.duration >= 0.0) {
            return bad("duration must be non-negative");
        }
        if !(self.spawn_spacing >= 15.0) {
            return bad("spawn_spacing must be at least 15 m");
        }
        if !(0.0..=1.0).contains(&self.lane_change_prob) {
            return bad("lane_change_prob must be in [0, 1]");
        }
        let weights_ok = |w: &mut dyn Iterator<Item = f64>| {
            let v: Vec<f64> = w.collect();
            v.iter().all(|x| *x >= 0.0 && x.is_finite()) && v.iter().sum::<f64>() > 0.0
        };
        if !weights_ok(&mut self.type_weights.values().copied()) {
            return bad("type_weights must be non-negative with a positive sum");
        }
        if !weights_ok(&mut self.color_weights.values().copied()) {
            return bad("color_weights must be non-negative with a positive sum");
        }
        Ok(())
    }

    pub fn steps(&self) -> u64 {
        (self.duration / self.dt).round() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteSegment {
    pub road: String,
    pub lane_index: usize,
    /// Arc length at which the agent starts moving to the next segment's lane.
    pub end_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LaneChange {
    Idle,
    Signaling { since: f64 },
}

/// Ground-truth state of one simulated vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleAgent {
    pub id: String,
    pub vtype: VehicleType,
    pub color: Color,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub route: Vec<RouteSegment>,
    pub route_pos: usize,
    pub desired_speed: f64,
    pub speed: f64,
    /// Acceleration applied during the last step.
    pub accel: f64,
    pub heading: f64,
    pub signal: Signal,
    pub x: f64,
    pub y: f64,
    pub road: String,
    pub lane_index: usize,
    pub lane: String,
    /// Front-bumper arc length along the lane.
    pub s: f64,
    pub lateral: f64,
    pub lane_change: LaneChange,
}

impl VehicleAgent {
    pub fn is_av(&self) -> bool {
        self.id.starts_with("AV")
    }

    fn rear(&self) -> f64 {
        self.s - self.length
    }

    fn place(&mut self, lane: &Lane, s: f64) {
        self.road = lane.road_id.clone();
        self.lane_index = lane.index;
        self.lane = lane.name.clone();
        self.s = s;
        self.lateral = 0.0;
        let (x, y) = lane.point_at(s, 0.0);
        self.x = x;
        self.y = y;
        self.heading = lane.heading_at(s);
    }
}

/// Immutable ground truth at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: f64,
    pub step: u64,
    pub agents: Arc<[VehicleAgent]>,
}

impl Snapshot {
    pub fn agent(&self, id: &str) -> Option<&VehicleAgent> {
        self.agents.iter().find(|a| a.id == id)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct WorldStats {
    pub respawns: u64,
    pub lane_changes: u64,
    /// Steps where the position floor had to override the following rule.
    pub emergency_clamps: u64,
    pub held_at_exit: u64,
}

pub struct World {
    config: SimConfig,
    network: Arc<RoadNetwork>,
    time: f64,
    step: u64,
    agents: Vec<VehicleAgent>,
    rng: ChaCha8Rng,
    stats: WorldStats,
}

/// Free-road plus car-following acceleration for one agent.
///
/// `leader` is `(bumper_gap, leader_speed)`.
pub fn following_accel(v: f64, desired: f64, leader: Option<(f64, f64)>, dt: f64) -> f64 {
    let mut a = A_MAX * (1.0 - (v / desired.max(0.1)).powi(4));
    if let Some((gap, v_lead)) = leader {
        let v_hw = ((gap - MIN_GAP) / TIME_HEADWAY).max(0.0);
        a = a.min((v_hw - v) / HEADWAY_RELAX);
        let reach = gap - MIN_GAP + v_lead * v_lead / (2.0 * MAX_DECEL);
        let v_safe = if reach <= 0.0 {
            0.0
        } else {
            let bdt = MAX_DECEL * dt;
            -bdt + (bdt * bdt + 2.0 * MAX_DECEL * reach).sqrt()
        };
        a = a.min((v_safe - v) / dt);
    }
    a.clamp(-MAX_DECEL, A_MAX)
}

/// Ballistic update over one step: returns `(distance, new_speed)`.
pub fn advance(v: f64, a: f64, dt: f64) -> (f64, f64) {
    let v_end = v + a * dt;
    if v_end >= 0.0 {
        ((v + v_end) * 0.5 * dt, v_end)
    } else {
        // Stops inside the step.
        (v * v / (2.0 * -a), 0.0)
    }
}

impl World {
    pub fn new(config: SimConfig, network: Arc<RoadNetwork>) -> Result<Self, SimError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        let mut slots: Vec<(String, f64)> = Vec::new();
        for lane in network.lanes() {
            let mut s = config.spawn_spacing;
            while s <= lane.length - 10.0 {
                slots.push((lane.name.clone(), s));
                s += config.spawn_spacing;
            }
        }
        if slots.len() < config.vehicle_count {
            return Err(SimError::InvalidConfig(format!(
                "vehicle_count {} exceeds {} spawn slots on this network",
                config.vehicle_count,
                slots.len()
            )));
        }
        slots.shuffle(&mut rng);

        let mut world = Self {
            config,
            network,
            time: 0.0,
            step: 0,
            agents: Vec::new(),
            rng,
            stats: WorldStats::default(),
        };
        let mut type_serial: BTreeMap<VehicleType, usize> = BTreeMap::new();
        for i in 0..world.config.vehicle_count {
            let is_av = i < world.config.av_count;
            let vtype = if is_av {
                VehicleType::Car
            } else {
                pick_weighted(&mut world.rng, &world.config.type_weights)
            };
            let id = if is_av {
                format!("AV{:03}", i + 1)
            } else {
                let n = type_serial.entry(vtype).or_insert(0);
                *n += 1;
                format!("{}{:03}", vtype.as_str(), n)
            };
            let color = pick_weighted(&mut world.rng, &world.config.color_weights);
            let (lane_name, s) = slots[i].clone();
            let lane = world.network.lane(&lane_name).unwrap().clone();
            let mut agent = world.fresh_agent(id, vtype, color);
            agent.route = world.random_route_from(&lane, s);
            agent.place(&lane, s);
            agent.speed = agent.desired_speed * world.rng.gen_range(0.5..0.9);
            world.agents.push(agent);
        }
        world.agents.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(world)
    }

    fn fresh_agent(&mut self, id: String, vtype: VehicleType, color: Color) -> VehicleAgent {
        let r = &mut self.rng;
        let round2 = |x: f64| (x * 100.0).round() / 100.0;
        let (length, width, height, v_des) = match vtype {
            VehicleType::Car => (r.gen_range(4.2..4.9), r.gen_range(1.7..1.9), r.gen_range(1.4..1.6), 13.9),
            VehicleType::Truck => (r.gen_range(8.0..12.0), 2.5, r.gen_range(3.2..3.9), 11.1),
            VehicleType::Bus => (r.gen_range(11.0..12.5), 2.55, 3.2, 11.1),
            VehicleType::Motorcycle => (r.gen_range(2.0..2.3), 0.8, 1.4, 15.3),
        };
        let desired_speed = round2(v_des * r.gen_range(0.85..1.15));
        VehicleAgent {
            id,
            vtype,
            color,
            length: round2(length),
            width: round2(width),
            height: round2(height),
            route: Vec::new(),
            route_pos: 0,
            desired_speed,
            speed: 0.0,
            accel: 0.0,
            heading: 0.0,
            signal: Signal::None,
            x: 0.0,
            y: 0.0,
            road: String::new(),
            lane_index: 0,
            lane: String::new(),
            s: 0.0,
            lateral: 0.0,
            lane_change: LaneChange::Idle,
        }
    }

    /// Route starting on `lane` at `s`, with an optional change to an adjacent lane.
    fn random_route_from(&mut self, lane: &Lane, s: f64) -> Vec<RouteSegment> {
        let road = self.network.road(&lane.road_id).unwrap();
        let n_lanes = road.lanes.len();
        let mut route = Vec::new();
        let change_at = s + (lane.length - s) * self.rng.gen_range(0.2..0.6);
        if n_lanes > 1 && self.rng.gen_bool(self.config.lane_change_prob) && change_at < lane.length - 40.0 {
            let target = if lane.index == 0 {
                1
            } else if lane.index + 1 == n_lanes {
                lane.index - 1
            } else if self.rng.gen_bool(0.5) {
                lane.index + 1
            } else {
                lane.index - 1
            };
            route.push(RouteSegment {
                road: lane.road_id.clone(),
                lane_index: lane.index,
                end_s: change_at,
            });
            let target_len = road.lanes[target].length;
            route.push(RouteSegment {
                road: lane.road_id.clone(),
                lane_index: target,
                end_s: target_len,
            });
        } else {
            route.push(RouteSegment {
                road: lane.road_id.clone(),
                lane_index: lane.index,
                end_s: lane.length,
            });
        }
        route
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn network(&self) -> &Arc<RoadNetwork> {
        &self.network
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn stats(&self) -> &WorldStats {
        &self.stats
    }

    pub fn agents(&self) -> &[VehicleAgent] {
        &self.agents
    }

    /// Immutable copy of the current ground truth.
    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            t: self.time,
            step: self.step,
            agents: self.agents.clone().into(),
        }
    }

    /// Serialized agent state, used to check determinism.
    pub fn state_json(&self) -> String {
        serde_json::to_string(&(self.step, self.time, &self.agents)).expect("world serializes")
    }

    pub fn step(&mut self) {
        let dt = self.config.dt;
        self.longitudinal(dt);
        self.step += 1;
        self.time = self.step as f64 * dt;
        self.lane_changes();
        self.respawns();
    }

    fn lane_groups(&self) -> BTreeMap<String, Vec<usize>> {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, a) in self.agents.iter().enumerate() {
            groups.entry(a.lane.clone()).or_default().push(i);
        }
        for idx in groups.values_mut() {
            // Front-most first; ties broken by id for determinism.
            idx.sort_by(|&a, &b| {
                let (a, b) = (&self.agents[a], &self.agents[b]);
                b.s.total_cmp(&a.s).then_with(|| a.id.cmp(&b.id))
            });
        }
        groups
    }

    fn longitudinal(&mut self, dt: f64) {
        let groups = self.lane_groups();
        for (lane_name, order) in groups {
            let lane = self.network.lane(&lane_name).unwrap().clone();
            let mut leader: Option<usize> = None;
            for &i in &order {
                let lead_state = leader.map(|j| {
                    let l = &self.agents[j];
                    (l.rear(), l.speed)
                });
                let agent = &mut self.agents[i];
                let a = following_accel(
                    agent.speed,
                    agent.desired_speed,
                    lead_state.map(|(rear, v)| (rear - agent.s, v)),
                    dt,
                );
                let (mut ds, mut v_new) = advance(agent.speed, a, dt);
                if let Some((rear, v_lead)) = lead_state {
                    let limit = rear - SAFETY_GAP - agent.s;
                    if ds > limit {
                        ds = limit.max(0.0);
                        v_new = v_new.min(v_lead);
                        self.stats.emergency_clamps += 1;
                    }
                }
                agent.accel = a;
                agent.speed = v_new;
                let s_new = agent.s + ds;
                agent.place(&lane, s_new.min(lane.length));
                // Keep overshoot so the exit check sees it.
                agent.s = s_new;
                if agent.lane_change == LaneChange::Idle {
                    agent.signal = if a < -BRAKE_SIGNAL_DECEL {
                        Signal::Brake
                    } else {
                        Signal::None
                    };
                }
                leader = Some(i);
            }
        }
    }

    fn lane_changes(&mut self) {
        for i in 0..self.agents.len() {
            let (seg_end, next) = {
                let a = &self.agents[i];
                match (a.route.get(a.route_pos), a.route.get(a.route_pos + 1)) {
                    (Some(cur), Some(next)) => (cur.end_s, next.clone()),
                    _ => continue,
                }
            };
            let agent = &self.agents[i];
            if agent.s < seg_end || agent.s >= self.lane_of(agent).length {
                continue;
            }
            match agent.lane_change {
                LaneChange::Idle => {
                    let agent = &mut self.agents[i];
                    agent.lane_change = LaneChange::Signaling { since: self.time };
                    agent.signal = if next.lane_index > agent.lane_index {
                        Signal::Left
                    } else {
                        Signal::Right
                    };
                }
                LaneChange::Signaling { since } => {
                    if self.time - since + 1e-9 < SIGNAL_LEAD_TIME {
                        continue;
                    }
                    let target = self
                        .network
                        .lane_by_index(&next.road, next.lane_index)
                        .unwrap()
                        .clone();
                    let (s_target, _, _) = target.nearest(agent.x, agent.y);
                    if !self.has_room(i, &target.name, s_target) {
                        continue;
                    }
                    let agent = &mut self.agents[i];
                    agent.place(&target, s_target);
                    agent.route_pos += 1;
                    agent.lane_change = LaneChange::Idle;
                    agent.signal = Signal::None;
                    self.stats.lane_changes += 1;
                }
            }
        }
    }

    fn lane_of(&self, agent: &VehicleAgent) -> &Lane {
        self.network.lane(&agent.lane).unwrap()
    }

    /// Whether agent `i` fits on `lane` with its front bumper at `s`.
    fn has_room(&self, i: usize, lane: &str, s: f64) -> bool {
        let me = &self.agents[i];
        let front = s;
        let rear = s - me.length;
        self.agents.iter().enumerate().all(|(j, o)| {
            if j == i || o.lane != lane {
                return true;
            }
            if o.s >= front {
                // Leader: keep a margin that covers one second of closing.
                o.rear() - front >= MIN_GAP + (me.speed - o.speed).max(0.0) * 1.0 + me.speed * 0.5
            } else {
                rear - o.s >= MIN_GAP + (o.speed - me.speed).max(0.0) * 1.0 + o.speed * 0.5
            }
        })
    }

    fn respawns(&mut self) {
        for i in 0..self.agents.len() {
            let length = self.lane_of(&self.agents[i]).length;
            if self.agents[i].s < length {
                continue;
            }
            let mut lanes: Vec<String> = self.network.lanes().map(|l| l.name.clone()).collect();
            lanes.shuffle(&mut self.rng);
            let mut placed = false;
            for name in lanes {
                let lane = self.network.lane(&name).unwrap().clone();
                let me_len = self.agents[i].length;
                let rearmost = self
                    .agents
                    .iter()
                    .enumerate()
                    .filter(|(j, o)| *j != i && o.lane == name)
                    .map(|(_, o)| (o.rear(), o.speed))
                    .min_by(|a, b| a.0.total_cmp(&b.0));
                let v_init = match rearmost {
                    Some((rear, v)) if rear - me_len >= 15.0 + v => v.min(self.agents[i].desired_speed),
                    Some(_) => continue,
                    None => self.agents[i].desired_speed * 0.8,
                };
                let route = self.random_route_from(&lane, me_len);
                let agent = &mut self.agents[i];
                agent.route = route;
                agent.route_pos = 0;
                agent.place(&lane, me_len);
                agent.speed = v_init;
                agent.accel = 0.0;
                agent.signal = Signal::None;
                agent.lane_change = LaneChange::Idle;
                self.stats.respawns += 1;
                placed = true;
                break;
            }
            if !placed {
                let lane = self.lane_of(&self.agents[i]).clone();
                let agent = &mut self.agents[i];
                agent.place(&lane, lane.length);
                agent.speed = 0.0;
                agent.accel = 0.0;
                self.stats.held_at_exit += 1;
            }
        }
    }
}

fn pick_weighted<T: Copy>(rng: &mut ChaCha8Rng, weights: &BTreeMap<T, f64>) -> T {
    let total: f64 = weights.values().sum();
    let mut x = rng.gen_range(0.0..total);
    for (k, w) in weights {
        if x < *w {
            return *k;
        }
        x -= w;
    }
    *weights.keys().next_back().unwrap()
}
