//! Fleets of in-process simulated agents.
//!
//! [`SimFleet`] runs each agent's real-time loop over UDP. [`VirtualFleet`]
//! drives the same agents on a caller-supplied clock and hands their
//! datagrams straight to an aggregator, so hours of traffic take
//! milliseconds.

use std::collections::HashSet;
use std::sync::Arc;

use tokio::task::JoinHandle;

use super::profile::SimProfile;
use super::SimError;
use crate::agent::collectors::SimulatedCollector;
use crate::agent::{run_loop, Agent, AgentConfig, AgentError, AgentStats, Shutdown};
use crate::aggregator::Aggregator;
use crate::clock::ManualClock;
use crate::protocol::{encode, Datagram};

pub const DEFAULT_PREFIX: &str = "node";

#[derive(Clone, Debug)]
pub struct FleetOptions {
    pub heartbeat_interval: u64,
    pub metric_interval: u64,
    /// `cpu_num` reported by every agent.
    pub cpu_num: u32,
    pub prefix: String,
}

impl Default for FleetOptions {
    fn default() -> Self {
        FleetOptions {
            heartbeat_interval: crate::agent::DEFAULT_HEARTBEAT_INTERVAL,
            metric_interval: crate::agent::DEFAULT_METRIC_INTERVAL,
            cpu_num: 1,
            prefix: DEFAULT_PREFIX.into(),
        }
    }
}

/// `node000`, `node001`, ...
pub fn synthetic_hostname(prefix: &str, i: usize) -> String {
    format!("{prefix}{i:03}")
}

/// One `(hostname, profile)` per agent. Agent `i` gets seed `seed + i`, so
/// random profiles differ between hosts but repeat between runs.
pub fn numbered_specs(count: usize, profile: &SimProfile, prefix: &str) -> Result<Vec<(String, SimProfile)>, SimError> {
    if count == 0 {
        return Err(SimError::NoAgents);
    }
    Ok((0..count)
        .map(|i| (synthetic_hostname(prefix, i), profile.with_seed(profile.seed.wrapping_add(i as u64))))
        .collect())
}

fn build_agent(host: &str, profile: &SimProfile, aggregator: &str, opts: &FleetOptions) -> Result<Agent, AgentError> {
    let cfg = AgentConfig {
        aggregator: aggregator.to_owned(),
        heartbeat_interval: opts.heartbeat_interval,
        metric_interval: opts.metric_interval,
        hostname: Some(host.to_owned()),
        collectors: vec!["simulated".into()],
    };
    Agent::new(cfg, vec![Box::new(SimulatedCollector::new(profile, opts.cpu_num))])
}

fn check_unique(specs: &[(String, SimProfile)]) -> Result<(), SimError> {
    if specs.is_empty() {
        return Err(SimError::NoAgents);
    }
    let mut seen = HashSet::new();
    match specs.iter().find(|(h, _)| !seen.insert(h.as_str())) {
        Some((h, _)) => Err(SimError::DuplicateHost(h.clone())),
        None => Ok(()),
    }
}

pub struct AgentHandle {
    pub hostname: String,
    pub profile: SimProfile,
    pub stats: Arc<AgentStats>,
    stop: Shutdown,
    task: Option<JoinHandle<Result<(), AgentError>>>,
}

impl AgentHandle {
    pub fn is_running(&self) -> bool {
        self.task.as_ref().is_some_and(|t| !t.is_finished())
    }
}

/// Agents running their real-time loops as Tokio tasks.
pub struct SimFleet {
    aggregator: String,
    opts: FleetOptions,
    agents: Vec<AgentHandle>,
}

impl SimFleet {
    /// Starts `count` agents named `node000...` sending to `aggregator`.
    /// An unresolvable address is logged and the agents run anyway.
    pub async fn spawn_agents(
        count: usize,
        profile: &SimProfile,
        aggregator: &str,
        opts: FleetOptions,
    ) -> Result<Self, SimError> {
        let specs = numbered_specs(count, profile, &opts.prefix)?;
        Self::spawn(specs, aggregator, opts).await
    }

    pub async fn spawn(
        specs: Vec<(String, SimProfile)>,
        aggregator: &str,
        opts: FleetOptions,
    ) -> Result<Self, SimError> {
        check_unique(&specs)?;
        if tokio::net::lookup_host(aggregator).await.map(|mut a| a.next().is_none()).unwrap_or(true) {
            tracing::warn!(%aggregator, "aggregator address unreachable; agents will keep trying");
        }
        let mut fleet = SimFleet { aggregator: aggregator.to_owned(), opts, agents: Vec::with_capacity(specs.len()) };
        for (host, profile) in specs {
            let stats = Arc::default();
            let (stop, _) = Shutdown::new();
            fleet.agents.push(AgentHandle { hostname: host, profile, stats, stop, task: None });
            fleet.start_index(fleet.agents.len() - 1)?;
        }
        Ok(fleet)
    }

    fn start_index(&mut self, i: usize) -> Result<(), SimError> {
        let h = &mut self.agents[i];
        let agent = build_agent(&h.hostname, &h.profile, &self.aggregator, &self.opts)?;
        h.stats = agent.stats();
        let (stop, rx) = Shutdown::new();
        h.stop = stop;
        h.task = Some(tokio::spawn(run_loop(agent, rx)));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn hostnames(&self) -> Vec<String> {
        self.agents.iter().map(|a| a.hostname.clone()).collect()
    }

    pub fn agents(&self) -> &[AgentHandle] {
        &self.agents
    }

    pub fn agent(&self, host: &str) -> Option<&AgentHandle> {
        self.agents.iter().find(|a| a.hostname == host)
    }

    fn index(&self, host: &str) -> Result<usize, SimError> {
        self.agents.iter().position(|a| a.hostname == host).ok_or_else(|| SimError::UnknownAgent(host.to_owned()))
    }

    /// Stops one agent's loop; the rest keep running.
    pub async fn silence(&mut self, host: &str) -> Result<(), SimError> {
        let i = self.index(host)?;
        let h = &mut self.agents[i];
        h.stop.trigger();
        if let Some(t) = h.task.take() {
            let _ = t.await;
        }
        Ok(())
    }

    /// Starts a fresh loop for a silenced agent.
    pub fn resume(&mut self, host: &str) -> Result<(), SimError> {
        let i = self.index(host)?;
        if self.agents[i].is_running() {
            return Ok(());
        }
        self.start_index(i)
    }

    /// Stops every agent and waits for the loops to exit.
    pub async fn shutdown(mut self) {
        for h in &self.agents {
            h.stop.trigger();
        }
        for h in &mut self.agents {
            if let Some(t) = h.task.take() {
                let _ = t.await;
            }
        }
    }
}

impl Drop for SimFleet {
    fn drop(&mut self) {
        for h in &self.agents {
            h.stop.trigger();
        }
    }
}

/// Agents stepped on virtual time and fed to an aggregator through the
/// wire encoding, without sockets.
pub struct VirtualFleet {
    agents: Vec<(Agent, bool)>,
}

impl VirtualFleet {
    pub fn new(specs: Vec<(String, SimProfile)>, opts: &FleetOptions) -> Result<Self, SimError> {
        check_unique(&specs)?;
        let agents = specs
            .iter()
            .map(|(h, p)| build_agent(h, p, "127.0.0.1:0", opts).map(|a| (a, true)))
            .collect::<Result<_, _>>()?;
        Ok(VirtualFleet { agents })
    }

    pub fn with_count(count: usize, profile: &SimProfile, opts: &FleetOptions) -> Result<Self, SimError> {
        Self::new(numbered_specs(count, profile, &opts.prefix)?, opts)
    }

    pub fn hostnames(&self) -> Vec<String> {
        self.agents.iter().map(|(a, _)| a.hostname().to_owned()).collect()
    }

    /// Silences or revives one agent.
    pub fn set_active(&mut self, host: &str, active: bool) -> Result<(), SimError> {
        let slot = self.agents.iter_mut().find(|(a, _)| a.hostname() == host);
        slot.map(|(_, on)| *on = active).ok_or_else(|| SimError::UnknownAgent(host.to_owned()))
    }

    /// Everything the active agents emit at `now`.
    pub fn step(&mut self, now: u64) -> Vec<Datagram> {
        self.agents.iter_mut().filter(|(_, on)| *on).flat_map(|(a, _)| a.tick(now)).collect()
    }

    /// Advances `clock` one second at a time over `[from, to)`, delivering
    /// each datagram to `agg` as encoded bytes.
    pub fn run(&mut self, agg: &Aggregator, clock: &ManualClock, from: u64, to: u64) {
        for t in from..to {
            clock.set(t);
            for d in self.step(t) {
                match encode(&d) {
                    Ok(bytes) => agg.ingest_bytes(&bytes),
                    Err(e) => tracing::warn!(error = %e, "unencodable simulated datagram"),
                }
            }
        }
        clock.set(to);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::Payload;
    use crate::sim::profile::ProfileKind;

    #[test]
    fn hostnames_are_numbered() {
        let specs = numbered_specs(3, &SimProfile::constant(1.0).with_seed(7), "node").unwrap();
        let names: Vec<_> = specs.iter().map(|(h, _)| h.as_str()).collect();
        assert_eq!(names, ["node000", "node001", "node002"]);
        assert_eq!(specs[2].1.seed, 9);
        assert!(matches!(numbered_specs(0, &SimProfile::constant(1.0), "node"), Err(SimError::NoAgents)));
    }

    fn stream(seed: u64) -> Vec<f64> {
        let p = SimProfile { kind: ProfileKind::Sine { mean: 50.0, amplitude: 20.0, period_s: 300.0 }, seed };
        let mut f = VirtualFleet::with_count(1, &p, &FleetOptions::default()).unwrap();
        (0..600)
            .flat_map(|t| f.step(1_700_000_000 + t))
            .filter_map(|d| match d.payload {
                Payload::Metric(m) if m.name == "cpu_user" => Some(m.value),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn seeded_stream_repeats() {
        let a = stream(42);
        assert_eq!(a.len(), 40);
        assert_eq!(a, stream(42));
    }

    #[test]
    fn duplicate_hosts_rejected() {
        let p = SimProfile::constant(1.0);
        let specs = vec![("a".to_owned(), p), ("a".to_owned(), p)];
        assert!(matches!(VirtualFleet::new(specs, &FleetOptions::default()), Err(SimError::DuplicateHost(_))));
    }

    #[tokio::test]
    async fn zero_count_rejected_for_real_fleet() {
        let r = SimFleet::spawn_agents(0, &SimProfile::constant(1.0), "127.0.0.1:9", FleetOptions::default()).await;
        assert!(matches!(r, Err(SimError::NoAgents)));
    }

    #[tokio::test]
    async fn unreachable_address_still_runs() {
        let mut f =
            SimFleet::spawn_agents(2, &SimProfile::constant(1.0), "no-such-host.invalid:1", FleetOptions::default())
                .await
                .unwrap();
        tokio::time::sleep(std::time::Duration::from_millis(100)).await;
        assert!(f.agents().iter().all(AgentHandle::is_running));
        f.silence("node001").await.unwrap();
        assert!(!f.agent("node001").unwrap().is_running());
        f.resume("node001").unwrap();
        assert!(f.agent("node001").unwrap().is_running());
        f.shutdown().await;
    }
}
