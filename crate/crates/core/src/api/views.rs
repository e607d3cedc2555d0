//! JSON shapes returned by the API.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::aggregator::{Aggregator, CloudletSummary, HostRecord};
use crate::control::{CommandJob, JobState, Mode, Outcome};
use crate::registry::INITIAL;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StatusClass {
    Green,
    Amber,
    Red,
    Unknown,
}

/// Colour cut-offs. Below `amber` is green, above `red` is red, anything in
/// between (inclusive) is amber.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassThresholds {
    /// Percent busy, `100 - cpu_idle`.
    pub cpu_amber: f64,
    pub cpu_red: f64,
    /// Bytes per second, `bytes_in + bytes_out`.
    pub net_amber: f64,
    pub net_red: f64,
}

impl Default for ClassThresholds {
    fn default() -> Self {
        ClassThresholds { cpu_amber: 50.0, cpu_red: 80.0, net_amber: 10e6, net_red: 80e6 }
    }
}

fn classify(v: Option<f64>, amber: f64, red: f64) -> StatusClass {
    match v {
        Some(v) if v < amber => StatusClass::Green,
        Some(v) if v <= red => StatusClass::Amber,
        Some(v) if v > red => StatusClass::Red,
        _ => StatusClass::Unknown,
    }
}

impl ClassThresholds {
    pub fn cpu(&self, busy: Option<f64>) -> StatusClass {
        classify(busy, self.cpu_amber, self.cpu_red)
    }

    pub fn net(&self, bytes: Option<f64>) -> StatusClass {
        classify(bytes, self.net_amber, self.net_red)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HostStatusView {
    pub hostname: String,
    pub up: bool,
    pub cpu_class: StatusClass,
    pub net_class: StatusClass,
    /// Owning cloudlet, or `Initial`.
    pub cloudlet: String,
    pub cpu_busy: Option<f64>,
    pub net_bytes: Option<f64>,
    pub cpu_num: Option<f64>,
}

impl HostStatusView {
    /// A down host has no current reading, so both classes are Unknown.
    pub fn build(host: &str, record: Option<&HostRecord>, up: bool, cloudlet: &str, t: &ClassThresholds) -> Self {
        let latest = |m: &str| record.and_then(|r| r.latest_value(m));
        let cpu_busy = latest("cpu_idle").map(|idle| 100.0 - idle);
        let net_bytes = match (latest("bytes_in"), latest("bytes_out")) {
            (None, None) => None,
            (i, o) => Some(i.unwrap_or(0.0) + o.unwrap_or(0.0)),
        };
        let (cpu_class, net_class) =
            if up { (t.cpu(cpu_busy), t.net(net_bytes)) } else { (StatusClass::Unknown, StatusClass::Unknown) };
        HostStatusView {
            hostname: host.to_owned(),
            up,
            cpu_class,
            net_class,
            cloudlet: cloudlet.to_owned(),
            cpu_busy,
            net_bytes,
            cpu_num: latest("cpu_num"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudletView {
    pub name: String,
    pub members: Vec<HostStatusView>,
    pub summary: CloudletSummary,
}

/// One registry revision with the host table as of one instant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overview {
    pub revision: u64,
    pub now: u64,
    pub cloudlets: Vec<CloudletView>,
    pub initial_pool: Vec<HostStatusView>,
}

impl Overview {
    /// Every host exactly once, sorted by name.
    pub fn all_hosts(self) -> Vec<HostStatusView> {
        let mut all: Vec<_> = self.cloudlets.into_iter().flat_map(|c| c.members).chain(self.initial_pool).collect();
        all.sort_by(|a, b| a.hostname.cmp(&b.hostname));
        all
    }
}

fn summarize(members: &[HostStatusView]) -> CloudletSummary {
    let mut s = CloudletSummary { hosts_up: 0, hosts_down: 0, cpus_total: 0 };
    for m in members {
        if m.up {
            s.hosts_up += 1;
            s.cpus_total += m.cpu_num.filter(|c| c.is_finite() && *c > 0.0).map_or(0, |c| c as u32);
        } else {
            s.hosts_down += 1;
        }
    }
    s
}

pub fn overview(agg: &Aggregator, t: &ClassThresholds) -> Overview {
    let snap = agg.registry().snapshot();
    let now = agg.now();
    let records: BTreeMap<String, HostRecord> =
        agg.hosts().all().into_iter().map(|r| (r.hostname.clone(), r)).collect();
    let view = |h: &str, cloudlet: &str| {
        let r = records.get(h);
        let up = r.is_some_and(|r| r.is_up(now, agg.down_threshold()));
        HostStatusView::build(h, r, up, cloudlet, t)
    };
    let cloudlets = snap
        .cloudlets()
        .into_iter()
        .map(|c| {
            let members: Vec<_> = c.members.iter().map(|h| view(h, &c.name)).collect();
            CloudletView { summary: summarize(&members), name: c.name, members }
        })
        .collect();
    let initial_pool = snap.initial_pool(records.keys().map(String::as_str)).iter().map(|h| view(h, INITIAL)).collect();
    Overview { revision: snap.revision, now, cloudlets, initial_pool }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultView {
    pub hostname: String,
    pub done: bool,
    pub outcome: Option<Outcome>,
    /// Convenience copy of the exit status when the command ran.
    pub exit_code: Option<i32>,
    /// Captured output, lossily decoded as UTF-8.
    pub stdout: String,
    pub stderr: String,
    pub stdout_truncated: bool,
    pub stderr_truncated: bool,
    pub duration_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobView {
    pub job_id: String,
    pub state: JobState,
    pub mode: Mode,
    pub command: String,
    pub targets: Vec<String>,
    pub wall_time_s: Option<f64>,
    pub results: Vec<ResultView>,
}

impl From<&CommandJob> for JobView {
    fn from(j: &CommandJob) -> Self {
        let results = j
            .targets
            .iter()
            .zip(&j.results)
            .map(|(host, r)| match r {
                Some(r) => ResultView {
                    hostname: host.clone(),
                    done: true,
                    exit_code: match r.outcome {
                        Outcome::Exited(c) => Some(c),
                        _ => None,
                    },
                    outcome: Some(r.outcome.clone()),
                    stdout: String::from_utf8_lossy(&r.stdout).into_owned(),
                    stderr: String::from_utf8_lossy(&r.stderr).into_owned(),
                    stdout_truncated: r.stdout_truncated,
                    stderr_truncated: r.stderr_truncated,
                    duration_s: Some(r.duration.as_secs_f64()),
                },
                None => ResultView {
                    hostname: host.clone(),
                    done: false,
                    outcome: None,
                    exit_code: None,
                    stdout: String::new(),
                    stderr: String::new(),
                    stdout_truncated: false,
                    stderr_truncated: false,
                    duration_s: None,
                },
            })
            .collect();
        JobView {
            job_id: j.job_id.clone(),
            state: j.state,
            mode: j.mode,
            command: j.command.clone(),
            targets: j.targets.clone(),
            wall_time_s: j.wall_time().map(|d| d.as_secs_f64()),
            results,
        }
    }
}
