//! Central collector: host liveness, metric ingest and per-scope queries.
//!
//! Group membership is never copied into the aggregator. Every cloudlet
//! query asks the registry for the current member list and reads the
//! members' own series, so a registry change is visible on the very next
//! query and no sample is ever stored twice.

pub mod listener;
pub mod pdu;
pub mod rack;

use std::collections::{BTreeMap, HashMap};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::protocol::{decode, Datagram, Payload};
use crate::registry::{Registry, INITIAL};
use crate::rrd::{slot_grid, RrdError, RrdStore, SeriesKey};

/// Missed heartbeats before a host is considered down.
pub const MISSED_HEARTBEATS: u64 = 4;
pub const DEFAULT_DOWN_THRESHOLD: u64 = MISSED_HEARTBEATS * crate::agent::DEFAULT_HEARTBEAT_INTERVAL;

#[derive(Debug, Error, PartialEq)]
pub enum AggregateError {
    #[error("unknown cloudlet {0}")]
    UnknownCloudlet(String),
    #[error("bad scope {0:?}: expected host:<name>, cloudlet:<name> or all")]
    BadScope(String),
    #[error("invalid window: start {start} must precede end {end}")]
    BadWindow { start: u64, end: u64 },
    #[error(transparent)]
    Store(#[from] RrdError),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Scope {
    Host(String),
    Cloudlet(String),
    All,
}

impl FromStr for Scope {
    type Err = AggregateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "all" {
            return Ok(Scope::All);
        }
        match s.split_once(':') {
            Some(("host", h)) if crate::protocol::valid_hostname(h) => Ok(Scope::Host(h.to_owned())),
            Some(("cloudlet", c)) if !c.is_empty() => Ok(Scope::Cloudlet(c.to_owned())),
            _ => Err(AggregateError::BadScope(s.to_owned())),
        }
    }
}

impl std::fmt::Display for Scope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scope::Host(h) => write!(f, "host:{h}"),
            Scope::Cloudlet(c) => write!(f, "cloudlet:{c}"),
            Scope::All => f.write_str("all"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatestValue {
    pub timestamp: u64,
    pub value: f64,
    pub units: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HostRecord {
    pub hostname: String,
    /// Aggregator clock at the most recent heartbeat.
    pub last_heartbeat: Option<u64>,
    pub first_seen: u64,
    pub latest: BTreeMap<String, LatestValue>,
}

impl HostRecord {
    pub fn is_up(&self, now: u64, down_threshold: u64) -> bool {
        self.last_heartbeat.is_some_and(|t| now.saturating_sub(t) <= down_threshold)
    }

    pub fn latest_value(&self, metric: &str) -> Option<f64> {
        self.latest.get(metric).map(|l| l.value)
    }
}

/// Every host the aggregator has heard from.
#[derive(Debug, Default)]
pub struct HostTable(RwLock<BTreeMap<String, HostRecord>>);

impl HostTable {
    pub fn contains(&self, host: &str) -> bool {
        self.0.read().contains_key(host)
    }

    pub fn get(&self, host: &str) -> Option<HostRecord> {
        self.0.read().get(host).cloned()
    }

    /// Hostnames in sorted order.
    pub fn names(&self) -> Vec<String> {
        self.0.read().keys().cloned().collect()
    }

    pub fn all(&self) -> Vec<HostRecord> {
        self.0.read().values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.0.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Default)]
pub struct IngestCounters {
    pub received: AtomicU64,
    pub malformed: AtomicU64,
    pub heartbeats: AtomicU64,
    pub metrics: AtomicU64,
    pub stale: AtomicU64,
    pub pdu_polls: AtomicU64,
    pub pdu_unreachable: AtomicU64,
    pub pdu_outlet_errors: AtomicU64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub hostname: String,
    pub values: Vec<Option<f64>>,
}

/// Per-host layers on a common slot grid, plus their per-slot total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackedSeries {
    pub metric: String,
    pub step: u64,
    pub timestamps: Vec<u64>,
    /// Sorted by hostname.
    pub layers: Vec<Layer>,
    /// Total of known layer values per slot; Unknown contributes 0.
    pub sum: Vec<f64>,
    /// Number of known layers per slot.
    pub coverage: Vec<u32>,
}

impl StackedSeries {
    pub fn layer(&self, host: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.hostname == host)
    }

    pub fn hostnames(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.hostname.as_str()).collect()
    }

    fn from_layers(metric: &str, step: u64, timestamps: Vec<u64>, layers: Vec<Layer>) -> Self {
        let n = timestamps.len();
        let mut sum = vec![0.0; n];
        let mut coverage = vec![0u32; n];
        for layer in &layers {
            for (i, v) in layer.values.iter().enumerate() {
                if let Some(v) = v {
                    sum[i] += v;
                    coverage[i] += 1;
                }
            }
        }
        StackedSeries { metric: metric.to_owned(), step, timestamps, layers, sum, coverage }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloudletSummary {
    pub hosts_up: u32,
    pub hosts_down: u32,
    /// `cpu_num` summed over hosts that are up.
    pub cpus_total: u32,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub struct Aggregator {
    store: Arc<RrdStore>,
    registry: Arc<Registry>,
    hosts: Arc<HostTable>,
    clock: Arc<dyn Clock>,
    down_threshold: u64,
    pub counters: IngestCounters,
}

impl Aggregator {
    pub fn new(
        store: Arc<RrdStore>,
        registry: Arc<Registry>,
        hosts: Arc<HostTable>,
        clock: Arc<dyn Clock>,
        down_threshold: u64,
    ) -> Self {
        Aggregator { store, registry, hosts, clock, down_threshold, counters: IngestCounters::default() }
    }

    /// In-memory store and registry with default settings.
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self::new(
            Arc::new(RrdStore::default()),
            Arc::new(Registry::in_memory()),
            Arc::default(),
            clock,
            DEFAULT_DOWN_THRESHOLD,
        )
    }

    pub fn store(&self) -> &Arc<RrdStore> {
        &self.store
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn hosts(&self) -> &Arc<HostTable> {
        &self.hosts
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    pub fn down_threshold(&self) -> u64 {
        self.down_threshold
    }

    /// Decodes and ingests one packet; malformed packets are counted and dropped.
    pub fn ingest_bytes(&self, bytes: &[u8]) {
        match decode(bytes) {
            Ok(d) => self.ingest(&d),
            Err(_) => {
                self.counters.malformed.fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    pub fn ingest(&self, d: &Datagram) {
        self.counters.received.fetch_add(1, Ordering::Relaxed);
        let now = self.clock.now();
        match &d.payload {
            Payload::Heartbeat => {
                self.counters.heartbeats.fetch_add(1, Ordering::Relaxed);
                let mut hosts = self.hosts.0.write();
                let rec = hosts.entry(d.hostname.clone()).or_insert_with(|| new_record(&d.hostname, now));
                rec.last_heartbeat = Some(rec.last_heartbeat.map_or(now, |t| t.max(now)));
            }
            Payload::Metric(m) => {
                self.counters.metrics.fetch_add(1, Ordering::Relaxed);
                self.record_metric(&d.hostname, &m.name, d.timestamp, m.value, &m.units);
            }
        }
    }

    fn record_metric(&self, host: &str, metric: &str, ts: u64, value: f64, units: &str) {
        {
            let now = self.clock.now();
            let mut hosts = self.hosts.0.write();
            let rec = hosts.entry(host.to_owned()).or_insert_with(|| new_record(host, now));
            let newer = rec.latest.get(metric).is_none_or(|l| ts >= l.timestamp);
            if newer {
                rec.latest.insert(metric.to_owned(), LatestValue { timestamp: ts, value, units: units.to_owned() });
            }
        }
        if self.store.insert(&SeriesKey::new(host, metric), ts, value).is_err() {
            self.counters.stale.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn is_up(&self, host: &str) -> bool {
        let now = self.clock.now();
        self.hosts.get(host).is_some_and(|r| r.is_up(now, self.down_threshold))
    }

    /// Member hosts of a scope, resolved against the current registry.
    pub fn resolve(&self, scope: &Scope) -> Result<Vec<String>, AggregateError> {
        let mut members = match scope {
            Scope::Host(h) => vec![h.clone()],
            Scope::All => self.hosts.names(),
            Scope::Cloudlet(c) if c == INITIAL => {
                let snap = self.registry.snapshot();
                let known = self.hosts.names();
                snap.initial_pool(known.iter().map(String::as_str))
            }
            Scope::Cloudlet(c) => {
                self.registry.snapshot().members(c).ok_or_else(|| AggregateError::UnknownCloudlet(c.clone()))?
            }
        };
        members.sort();
        members.dedup();
        Ok(members)
    }

    /// Stacks `metric` over every member of `scope` for `[start, end)`.
    ///
    /// Members without the metric contribute no layer. Layers that come
    /// from archives of different resolution are averaged onto the
    /// coarsest step among them.
    pub fn aggregate(
        &self,
        scope: &Scope,
        metric: &str,
        start: u64,
        end: u64,
    ) -> Result<StackedSeries, AggregateError> {
        if start >= end {
            return Err(AggregateError::BadWindow { start, end });
        }
        let members = self.resolve(scope)?;
        let mut present = Vec::new();
        let mut step = 0u64;
        for host in &members {
            let key = SeriesKey::new(host.as_str(), metric);
            match self.store.select_step(&key, start) {
                Ok(s) => {
                    step = if step == 0 { s } else { step / gcd(step, s) * s };
                    present.push((host, key, s));
                }
                Err(RrdError::UnknownSeries(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        if step == 0 {
            step = self.store.archive_specs()[0].step;
        }
        let grid = slot_grid(step, start, end)?;
        let grid_start = grid[0];
        let grid_end = grid_start + step * grid.len() as u64;

        let mut layers = Vec::with_capacity(present.len());
        for (host, key, own_step) in present {
            let series = self.store.query_step(&key, own_step, grid_start, grid_end)?;
            let values = if own_step == step {
                series.points.iter().map(|p| p.value).collect()
            } else {
                let per = (step / own_step) as usize;
                series
                    .points
                    .chunks(per)
                    .map(|chunk| {
                        let known: Vec<f64> = chunk.iter().filter_map(|p| p.value).collect();
                        (!known.is_empty()).then(|| known.iter().sum::<f64>() / known.len() as f64)
                    })
                    .collect()
            };
            layers.push(Layer { hostname: host.clone(), values });
        }
        Ok(StackedSeries::from_layers(metric, step, grid, layers))
    }

    pub fn cloudlet_summary(&self, cloudlet: &str) -> Result<CloudletSummary, AggregateError> {
        let members = self.resolve(&Scope::Cloudlet(cloudlet.to_owned()))?;
        Ok(self.summarize(&members))
    }

    pub fn summarize(&self, members: &[String]) -> CloudletSummary {
        let now = self.clock.now();
        let hosts = self.hosts.0.read();
        let mut s = CloudletSummary { hosts_up: 0, hosts_down: 0, cpus_total: 0 };
        for m in members {
            match hosts.get(m) {
                Some(r) if r.is_up(now, self.down_threshold) => {
                    s.hosts_up += 1;
                    let cpus = r.latest_value("cpu_num").unwrap_or(0.0);
                    s.cpus_total += if cpus.is_finite() && cpus > 0.0 { cpus as u32 } else { 0 };
                }
                _ => s.hosts_down += 1,
            }
        }
        s
    }

    /// Latest value of `metric` for each of `hosts`.
    pub fn latest(&self, hosts: &[String], metric: &str) -> HashMap<String, f64> {
        let table = self.hosts.0.read();
        hosts.iter().filter_map(|h| table.get(h).and_then(|r| r.latest_value(metric)).map(|v| (h.clone(), v))).collect()
    }
}

fn new_record(host: &str, now: u64) -> HostRecord {
    HostRecord { hostname: host.to_owned(), last_heartbeat: None, first_seen: now, latest: BTreeMap::new() }
}
