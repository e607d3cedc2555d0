//! Per-host sampling daemon.
//!
//! An agent knows its own hostname and the aggregator's address, nothing
//! else. In particular it has no notion of cloudlets, so regrouping hosts
//! never touches a running agent.

pub mod collectors;

use std::collections::HashSet;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;
use tokio::net::UdpSocket;
use tokio::sync::watch;
use tokio::time::MissedTickBehavior;

use crate::conf::{ConfError, KeyValues};
use crate::protocol::{encode, Datagram};
pub use collectors::{Collected, Collector, CollectorError, MetricDescriptor};

pub const DEFAULT_HEARTBEAT_INTERVAL: u64 = 5;
pub const DEFAULT_METRIC_INTERVAL: u64 = 15;
pub const AGGREGATOR_ENV: &str = "C2MS_AGGREGATOR";

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid agent config: {0}")]
    Config(String),
    #[error(transparent)]
    ConfFile(#[from] ConfError),
    #[error("metric {metric} produced by both {first} and {second}")]
    DuplicateMetric { metric: String, first: String, second: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentConfig {
    pub aggregator: String,
    pub heartbeat_interval: u64,
    pub metric_interval: u64,
    pub hostname: Option<String>,
    pub collectors: Vec<String>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            aggregator: "127.0.0.1:8649".into(),
            heartbeat_interval: DEFAULT_HEARTBEAT_INTERVAL,
            metric_interval: DEFAULT_METRIC_INTERVAL,
            hostname: None,
            collectors: vec!["core".into()],
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.heartbeat_interval < 1 {
            return Err(AgentError::Config("heartbeat_interval must be at least 1".into()));
        }
        if self.metric_interval < self.heartbeat_interval {
            return Err(AgentError::Config("metric_interval must be >= heartbeat_interval".into()));
        }
        if self.aggregator.trim().is_empty() {
            return Err(AgentError::Config("aggregator address is empty".into()));
        }
        Ok(())
    }

    /// Overlays file keys onto `self`.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<(), AgentError> {
        for key in kv.keys() {
            if !matches!(
                key,
                "aggregator"
                    | "heartbeat_interval"
                    | "metric_interval"
                    | "hostname"
                    | "collectors"
                    | "profile"
                    | "seed"
            ) {
                return Err(AgentError::Config(format!("unknown key {key:?}")));
            }
        }
        if let Some(a) = kv.get("aggregator") {
            self.aggregator = a.to_owned();
        }
        if let Some(v) = kv.parsed("heartbeat_interval")? {
            self.heartbeat_interval = v;
        }
        if let Some(v) = kv.parsed("metric_interval")? {
            self.metric_interval = v;
        }
        if let Some(h) = kv.get("hostname") {
            self.hostname = Some(h.to_owned());
        }
        if let Some(c) = kv.get("collectors") {
            self.collectors = split_list(c);
        }
        Ok(())
    }

    /// `C2MS_AGGREGATOR` overrides the file value; command-line flags are
    /// applied after it.
    pub fn apply_env(&mut self) {
        if let Ok(addr) = std::env::var(AGGREGATOR_ENV) {
            if !addr.trim().is_empty() {
                self.aggregator = addr.trim().to_owned();
            }
        }
    }
}

pub fn split_list(s: &str) -> Vec<String> {
    s.split(|c: char| c == ',' || c.is_whitespace()).filter(|x| !x.is_empty()).map(str::to_owned).collect()
}

pub fn local_hostname() -> String {
    std::fs::read_to_string("/proc/sys/kernel/hostname")
        .ok()
        .map(|s| s.trim().to_owned())
        .filter(|s| !s.is_empty())
        .or_else(|| std::env::var("HOSTNAME").ok())
        .unwrap_or_else(|| "localhost".into())
}

/// Counters observable from outside a running loop.
#[derive(Debug, Default)]
pub struct AgentStats {
    pub heartbeats_sent: AtomicU64,
    pub metrics_sent: AtomicU64,
    pub send_errors: AtomicU64,
    pub collector_errors: AtomicU64,
    /// Datagrams that arrived at the agent's socket. Nothing in the system
    /// ever talks to an agent, so this stays at zero.
    pub inbound_messages: AtomicU64,
    /// Identity of the current loop; changes only if the loop is restarted.
    pub loop_id: AtomicU64,
    pub loop_starts: AtomicU64,
}

pub struct Agent {
    hostname: String,
    config: AgentConfig,
    collectors: Vec<Box<dyn Collector>>,
    next_heartbeat: Option<u64>,
    next_metrics: Option<u64>,
    stats: Arc<AgentStats>,
}

impl Agent {
    pub fn new(config: AgentConfig, collectors: Vec<Box<dyn Collector>>) -> Result<Self, AgentError> {
        config.validate()?;
        let hostname = config.hostname.clone().unwrap_or_else(local_hostname);
        if !crate::protocol::valid_hostname(&hostname) || hostname.len() > crate::protocol::MAX_HOSTNAME {
            return Err(AgentError::Config(format!("invalid hostname {hostname:?}")));
        }
        let mut seen: std::collections::HashMap<&str, &str> = std::collections::HashMap::new();
        for c in &collectors {
            let mut local = HashSet::new();
            for m in c.metrics() {
                if !local.insert(m.name) {
                    continue;
                }
                if let Some(first) = seen.insert(m.name, c.name()) {
                    return Err(AgentError::DuplicateMetric {
                        metric: m.name.into(),
                        first: first.into(),
                        second: c.name().into(),
                    });
                }
            }
        }
        Ok(Agent { hostname, config, collectors, next_heartbeat: None, next_metrics: None, stats: Arc::default() })
    }

    pub fn hostname(&self) -> &str {
        &self.hostname
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn stats(&self) -> Arc<AgentStats> {
        self.stats.clone()
    }

    pub fn heartbeat(&self, now: u64) -> Datagram {
        Datagram::heartbeat(&*self.hostname, now)
    }

    /// Runs every collector once; errors are counted and logged, samples kept.
    pub fn collect(&mut self, now: u64) -> Vec<Datagram> {
        let mut out = Vec::new();
        for c in &mut self.collectors {
            let Collected { samples, errors } = c.collect(&self.hostname, now);
            for e in errors {
                self.stats.collector_errors.fetch_add(1, Ordering::Relaxed);
                tracing::debug!(host = %self.hostname, collector = c.name(), error = %e, "collector error");
            }
            out.extend(samples.iter().map(|s| s.to_datagram()));
        }
        out
    }

    /// Schedule-driven step for virtual time: everything due at `now`.
    pub fn tick(&mut self, now: u64) -> Vec<Datagram> {
        let mut out = Vec::new();
        if self.next_heartbeat.is_none_or(|t| now >= t) {
            out.push(self.heartbeat(now));
            self.next_heartbeat = Some(advance(self.next_heartbeat, now, self.config.heartbeat_interval));
        }
        if self.next_metrics.is_none_or(|t| now >= t) {
            out.extend(self.collect(now));
            self.next_metrics = Some(advance(self.next_metrics, now, self.config.metric_interval));
        }
        out
    }

    fn record_sent(&self, d: &Datagram) {
        let counter = match d.payload {
            crate::protocol::Payload::Heartbeat => &self.stats.heartbeats_sent,
            crate::protocol::Payload::Metric(_) => &self.stats.metrics_sent,
        };
        counter.fetch_add(1, Ordering::Relaxed);
    }

    /// Sends a batch over `socket`, counting successes and failures.
    pub async fn send(&self, socket: &UdpSocket, target: SocketAddr, batch: &[Datagram]) {
        for d in batch {
            let Ok(bytes) = encode(d) else {
                tracing::warn!(host = %self.hostname, "dropping unencodable datagram");
                continue;
            };
            match socket.send_to(&bytes, target).await {
                Ok(_) => self.record_sent(d),
                Err(e) => {
                    self.stats.send_errors.fetch_add(1, Ordering::Relaxed);
                    tracing::debug!(host = %self.hostname, error = %e, "send failed");
                }
            }
        }
    }
}

fn advance(prev: Option<u64>, now: u64, interval: u64) -> u64 {
    match prev {
        // keep cadence unless we fell more than one interval behind
        Some(t) if now < t + interval => t + interval,
        _ => now + interval,
    }
}

async fn resolve(addr: &str) -> Option<SocketAddr> {
    match tokio::net::lookup_host(addr).await {
        Ok(mut it) => it.next(),
        Err(e) => {
            tracing::warn!(%addr, error = %e, "cannot resolve aggregator");
            None
        }
    }
}

/// Handle for stopping agent loops.
#[derive(Clone)]
pub struct Shutdown(watch::Sender<bool>);

impl Shutdown {
    pub fn new() -> (Self, watch::Receiver<bool>) {
        let (tx, rx) = watch::channel(false);
        (Shutdown(tx), rx)
    }

    pub fn subscribe(&self) -> watch::Receiver<bool> {
        self.0.subscribe()
    }

    pub fn trigger(&self) {
        let _ = self.0.send(true);
    }
}

/// Real-time loop: one heartbeat per heartbeat interval, one collection
/// per metric interval, until `shutdown` flips. Send failures are counted
/// and the loop carries on.
pub async fn run_loop(mut agent: Agent, mut shutdown: watch::Receiver<bool>) -> Result<(), AgentError> {
    let stats = agent.stats();
    stats.loop_id.store(rand::random::<u64>() | 1, Ordering::SeqCst);
    stats.loop_starts.fetch_add(1, Ordering::SeqCst);

    let socket = UdpSocket::bind("0.0.0.0:0").await?;
    let clock = crate::clock::SystemClock;
    let mut hb = tokio::time::interval(Duration::from_secs(agent.config.heartbeat_interval));
    let mut metrics = tokio::time::interval(Duration::from_secs(agent.config.metric_interval));
    hb.set_missed_tick_behavior(MissedTickBehavior::Delay);
    metrics.set_missed_tick_behavior(MissedTickBehavior::Delay);
    let mut target: Option<SocketAddr> = None;
    let mut inbound = [0u8; 1024];

    loop {
        if *shutdown.borrow() {
            break;
        }
        let batch = tokio::select! {
            _ = shutdown.changed() => break,
            _ = hb.tick() => vec![agent.heartbeat(crate::clock::Clock::now(&clock))],
            _ = metrics.tick() => agent.collect(crate::clock::Clock::now(&clock)),
            r = socket.recv_from(&mut inbound) => {
                if r.is_ok() {
                    stats.inbound_messages.fetch_add(1, Ordering::Relaxed);
                }
                continue;
            }
        };
        if target.is_none() {
            target = resolve(&agent.config.aggregator).await;
        }
        match target {
            Some(t) => agent.send(&socket, t, &batch).await,
            None => {
                stats.send_errors.fetch_add(batch.len() as u64, Ordering::Relaxed);
            }
        }
    }
    Ok(())
}

/// Builds collectors from configured names.
pub fn build_collectors(
    names: &[String],
    profile: Option<&crate::sim::profile::SimProfile>,
) -> Result<Vec<Box<dyn Collector>>, AgentError> {
    let mut out: Vec<Box<dyn Collector>> = Vec::new();
    for name in names {
        match name.as_str() {
            "core" => out.push(Box::new(collectors::ProcCollector::new())),
            "temperature" => out.push(Box::new(collectors::TemperatureCollector::new(
                collectors::SysfsSensor::discover(std::path::Path::new("/sys")),
            ))),
            "simulated" => {
                let p = profile.copied().unwrap_or_else(|| crate::sim::profile::SimProfile::constant(10.0));
                out.push(Box::new(collectors::SimulatedCollector::new(&p, 1)));
            }
            other => return Err(AgentError::Config(format!("unknown collector {other:?}"))),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::collectors::*;
    use super::*;
    use crate::protocol::Payload;
    use crate::sim::profile::SimProfile;

    fn sim_agent(hb: u64, metric: u64) -> Agent {
        let cfg = AgentConfig {
            hostname: Some("node01".into()),
            heartbeat_interval: hb,
            metric_interval: metric,
            ..AgentConfig::default()
        };
        Agent::new(cfg, vec![Box::new(SimulatedCollector::new(&SimProfile::constant(5.0), 1))]).unwrap()
    }

    #[test]
    fn config_invariants() {
        let mut c = AgentConfig { heartbeat_interval: 0, ..AgentConfig::default() };
        assert!(c.validate().is_err());
        c.heartbeat_interval = 20;
        assert!(c.validate().is_err());
        c.metric_interval = 20;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn config_file_keys() {
        let kv = KeyValues::parse(
            "aggregator = 10.1.1.1:8649\nheartbeat_interval = 2\nmetric_interval = 10\nhostname = web1\ncollectors = core, temperature\n",
        )
        .unwrap();
        let mut c = AgentConfig::default();
        c.apply(&kv).unwrap();
        assert_eq!(c.aggregator, "10.1.1.1:8649");
        assert_eq!((c.heartbeat_interval, c.metric_interval), (2, 10));
        assert_eq!(c.hostname.as_deref(), Some("web1"));
        assert_eq!(c.collectors, vec!["core", "temperature"]);
        assert!(c.apply(&KeyValues::parse("cluster = x\n").unwrap()).is_err());
    }

    #[test]
    fn duplicate_metric_names_rejected() {
        let cfg = AgentConfig { hostname: Some("h".into()), ..AgentConfig::default() };
        let err = Agent::new(
            cfg,
            vec![Box::new(SimulatedCollector::new(&SimProfile::constant(1.0), 1)), Box::new(ProcCollector::new())],
        )
        .err()
        .unwrap();
        assert!(matches!(err, AgentError::DuplicateMetric { .. }));
    }

    #[test]
    fn tick_schedule_over_a_minute() {
        let mut a = sim_agent(5, 15);
        let (mut hb, mut metric_batches) = (0, 0);
        for now in 1000..1060 {
            let out = a.tick(now);
            hb += out.iter().filter(|d| d.payload == Payload::Heartbeat).count();
            if out.iter().any(|d| matches!(d.payload, Payload::Metric(_))) {
                metric_batches += 1;
            }
        }
        assert_eq!(hb, 12);
        assert_eq!(metric_batches, 4);
    }

    #[test]
    fn tick_recovers_after_a_stall() {
        let mut a = sim_agent(5, 15);
        a.tick(0);
        let out = a.tick(100);
        assert_eq!(out.iter().filter(|d| d.payload == Payload::Heartbeat).count(), 1);
        assert!(a.tick(101).is_empty());
        assert!(!a.tick(105).is_empty());
    }
}
