//! In-process vehicle-to-cloud data plane.
//!
//! Sensors publish [`OiMessage`]s on the `/OI` topic; the cloud node drains
//! its subscription into a [`FreshnessQueue`], and a [`SceneConstructor`]
//! turns the queue into a [`LinguisticScene`] on every tick.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perception::ObjectInfo;
use crate::road::RoadNetwork;

pub const OI_TOPIC: &str = "/OI";
pub const DEFAULT_QUEUE_CAPACITY: usize = 2000;
pub const DEFAULT_SCENE_HZ: f64 = 5.0;

#[derive(Debug, Error, PartialEq)]
pub enum BusError {
    #[error("message from {publisher} carries a record from sensor {found}")]
    ForeignRecord { publisher: String, found: String },
    #[error("scene parse error: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OiMessage {
    pub topic: String,
    pub publisher: String,
    pub ts: f64,
    pub records: Vec<ObjectInfo>,
}

impl OiMessage {
    pub fn new(publisher: impl Into<String>, ts: f64, records: Vec<ObjectInfo>) -> Self {
        Self {
            topic: OI_TOPIC.to_string(),
            publisher: publisher.into(),
            ts,
            records,
        }
    }
}

struct Subscriber {
    topic: String,
    tx: Sender<Arc<OiMessage>>,
}

/// Topic-based pub/sub with per-publisher FIFO delivery and no loss.
///
/// Clones share the same subscriber set, so publishers on several threads
/// can each hold a handle.
#[derive(Clone, Default)]
pub struct Bus {
    subscribers: Arc<Mutex<Vec<Subscriber>>>,
    latency_s: f64,
}

pub struct Subscription {
    rx: Receiver<Arc<OiMessage>>,
    latency_s: f64,
    held: VecDeque<Arc<OiMessage>>,
}

impl Bus {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bus whose messages become visible `latency_ms` after their timestamp.
    pub fn with_latency_ms(latency_ms: f64) -> Self {
        Self {
            subscribers: Arc::default(),
            latency_s: latency_ms.max(0.0) / 1000.0,
        }
    }

    pub fn subscribe(&self, topic: &str) -> Subscription {
        let (tx, rx) = channel();
        self.subscribers.lock().unwrap().push(Subscriber {
            topic: topic.to_string(),
            tx,
        });
        Subscription {
            rx,
            latency_s: self.latency_s,
            held: VecDeque::new(),
        }
    }

    pub fn publish(&self, msg: OiMessage) -> Result<(), BusError> {
        if let Some(r) = msg.records.iter().find(|r| r.ds != msg.publisher) {
            return Err(BusError::ForeignRecord {
                publisher: msg.publisher.clone(),
                found: r.ds.clone(),
            });
        }
        let msg = Arc::new(msg);
        let mut subs = self.subscribers.lock().unwrap();
        // Dropped subscriptions are pruned on the next publish.
        subs.retain(|s| s.topic != msg.topic || s.tx.send(Arc::clone(&msg)).is_ok());
        Ok(())
    }
}

impl Subscription {
    /// Every message received so far, ignoring latency.
    pub fn drain(&mut self) -> Vec<Arc<OiMessage>> {
        let mut out: Vec<_> = self.held.drain(..).collect();
        out.extend(self.rx.try_iter());
        out
    }

    /// Messages whose delivery time (`ts + latency`) is at or before `now`.
    pub fn drain_ready(&mut self, now: f64) -> Vec<Arc<OiMessage>> {
        self.held.extend(self.rx.try_iter());
        let mut out = Vec::new();
        let mut keep = VecDeque::new();
        for m in self.held.drain(..) {
            if m.ts + self.latency_s <= now + 1e-9 {
                out.push(m);
            } else {
                keep.push_back(m);
            }
        }
        self.held = keep;
        out
    }
}

/// Fixed-capacity FIFO of object records; the oldest entries are evicted
/// first once the capacity is reached.
#[derive(Debug, Clone)]
pub struct FreshnessQueue<T = ObjectInfo> {
    capacity: usize,
    entries: VecDeque<T>,
    evicted: u64,
}

impl<T> FreshnessQueue<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
            evicted: 0,
        }
    }

    pub fn push<I: IntoIterator<Item = T>>(&mut self, records: I) {
        for r in records {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
                self.evicted += 1;
            }
            self.entries.push_back(r);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn evicted(&self) -> u64 {
        self.evicted
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.entries.iter()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSummary {
    pub id: String,
    pub lanes: Vec<String>,
}

/// The aggregated scene handed to the query layer. Floats are kept at
/// millimeter precision so the in-memory value equals its JSON rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinguisticScene {
    pub scene_id: u64,
    pub ts: f64,
    pub objects: Vec<ObjectInfo>,
    pub roads: Vec<RoadSummary>,
}

impl LinguisticScene {
    pub fn object(&self, id: &str) -> Option<&ObjectInfo> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn av_ids(&self) -> Vec<&str> {
        self.objects.iter().filter(|o| o.is_av()).map(|o| o.id.as_str()).collect()
    }
}

/// Rounds to 3 decimals; never produces negative zero.
pub fn q3(x: f64) -> f64 {
    let r = (x * 1000.0).round() / 1000.0;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn quantize(o: &ObjectInfo) -> ObjectInfo {
    ObjectInfo {
        ts: q3(o.ts),
        x: q3(o.x),
        y: q3(o.y),
        s: q3(o.s),
        lat: q3(o.lat),
        v: q3(o.v),
        a: q3(o.a),
        h: q3(o.h),
        le: q3(o.le),
        wi: q3(o.wi),
        he: q3(o.he),
        ..o.clone()
    }
}

fn freshness_rank(o: &ObjectInfo) -> (u8, &str) {
    // Lower is preferred on equal timestamps.
    (if o.ds.starts_with("AV") { 0 } else { 1 }, o.ds.as_str())
}

fn is_fresher(candidate: &ObjectInfo, current: &ObjectInfo) -> bool {
    match candidate.ts.total_cmp(&current.ts) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => freshness_rank(candidate) < freshness_rank(current),
    }
}

/// Deduplicates queue entries by object id keeping the freshest record
/// (highest `ts`; ties prefer AV sensors, then the smallest sensor id), drops
/// records whose road or lane is not in the network, and summarizes roads.
pub fn construct_scene(
    queue: &FreshnessQueue<ObjectInfo>,
    network: &RoadNetwork,
    t: f64,
    scene_id: u64,
) -> LinguisticScene {
    let mut best: BTreeMap<&str, &ObjectInfo> = BTreeMap::new();
    for rec in queue.iter() {
        match best.get(rec.id.as_str()) {
            Some(cur) if !is_fresher(rec, cur) => {}
            _ => {
                best.insert(rec.id.as_str(), rec);
            }
        }
    }
    let objects = best
        .into_values()
        .filter(|o| network.lane(&o.ln).is_some_and(|l| l.road_id == o.rd))
        .map(quantize)
        .collect();
    LinguisticScene {
        scene_id,
        ts: q3(t),
        objects,
        roads: road_summaries(network),
    }
}

pub fn road_summaries(network: &RoadNetwork) -> Vec<RoadSummary> {
    network
        .roads
        .iter()
        .map(|r| RoadSummary {
            id: r.id.clone(),
            lanes: r.lanes.iter().map(|l| l.name.clone()).collect(),
        })
        .collect()
}

/// Pulls from the queue at a fixed frequency and numbers scenes.
#[derive(Debug, Clone)]
pub struct SceneConstructor {
    period: f64,
    next_tick: f64,
    next_id: u64,
}

impl SceneConstructor {
    pub fn new(hz: f64) -> Self {
        assert!(hz > 0.0, "scene frequency must be positive");
        Self {
            period: 1.0 / hz,
            next_tick: 0.0,
            next_id: 0,
        }
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    /// Builds a scene if `t` has reached the next tick.
    pub fn maybe_construct(
        &mut self,
        queue: &FreshnessQueue<ObjectInfo>,
        network: &RoadNetwork,
        t: f64,
    ) -> Option<LinguisticScene> {
        if t + 1e-9 < self.next_tick {
            return None;
        }
        let scene = construct_scene(queue, network, t, self.next_id);
        self.next_id += 1;
        while self.next_tick <= t + 1e-9 {
            self.next_tick += self.period;
        }
        Some(scene)
    }
}

fn push_f3(out: &mut String, x: f64) {
    write!(out, "{:.3}", q3(x)).unwrap();
}

fn push_str(out: &mut String, s: &str) {
    out.push_str(&serde_json::to_string(s).unwrap());
}

/// Canonical single-line JSON rendering with fixed field order and
/// 3-decimal floats.
pub fn render_ls(scene: &LinguisticScene) -> String {
    let mut out = String::with_capacity(256 + scene.objects.len() * 256);
    write!(out, "{{\"scene_id\":{},\"ts\":", scene.scene_id).unwrap();
    push_f3(&mut out, scene.ts);
    out.push_str(",\"objects\":[");
    for (i, o) in scene.objects.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str("{\"id\":");
        push_str(&mut out, &o.id);
        for (key, val) in [
            ("ts", o.ts),
            ("x", o.x),
            ("y", o.y),
            ("s", o.s),
            ("lat", o.lat),
            ("v", o.v),
            ("a", o.a),
            ("h", o.h),
            ("le", o.le),
            ("wi", o.wi),
            ("he", o.he),
        ] {
            write!(out, ",\"{key}\":").unwrap();
            push_f3(&mut out, val);
        }
        out.push_str(",\"ty\":");
        push_str(&mut out, o.ty.as_str());
        out.push_str(",\"co\":");
        push_str(&mut out, o.co.as_str());
        out.push_str(",\"ln\":");
        push_str(&mut out, &o.ln);
        write!(out, ",\"lx\":{}", o.lx).unwrap();
        out.push_str(",\"rd\":");
        push_str(&mut out, &o.rd);
        out.push_str(",\"sg\":");
        push_str(&mut out, o.sg.as_str());
        out.push_str(",\"ds\":");
        push_str(&mut out, &o.ds);
        out.push('}');
    }
    out.push_str("],\"roads\":[");
    for (i, r) in scene.roads.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str("{\"id\":");
        push_str(&mut out, &r.id);
        out.push_str(",\"lanes\":[");
        for (j, l) in r.lanes.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            push_str(&mut out, l);
        }
        out.push_str("]}");
    }
    out.push_str("]}");
    out
}

pub fn parse_ls(text: &str) -> Result<LinguisticScene, BusError> {
    serde_json::from_str(text).map_err(|e| BusError::Parse(e.to_string()))
}

/// Reads a JSONL scene stream (one scene per non-empty line).
pub fn read_scene_stream(text: &str) -> Result<Vec<LinguisticScene>, BusError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_ls(l).map_err(|e| BusError::Parse(format!("line {}: {e}", i + 1))))
        .collect()
}
