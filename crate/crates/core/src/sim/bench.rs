//! Query-cost and control-speedup benchmarks.
//!
//! Each report keeps its raw per-repetition timings next to the derived
//! mean and 95% confidence half-width, so the summary can be recomputed
//! from the output alone.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::client::ApiClient;
use super::fleet::synthetic_hostname;
use super::SimError;
use crate::control::{ControlEngine, JobRequest, Mode};

pub const QUERY_REPS: usize = 15;
pub const CONTROL_REPS: usize = 5;
pub const QUERY_METRIC: &str = "cpu_user";
/// Window queried by the query benchmark.
pub const QUERY_WINDOW: u64 = 3600;

/// Sample mean and the half-width of its two-sided 95% Student-t interval.
/// The half-width is `None` for fewer than two samples.
pub fn mean_half_width(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("df >= 1").inverse_cdf(0.975);
    (mean, Some(t * (var / n as f64).sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub scenario: String,
    pub host_count: usize,
    pub repetitions: usize,
    pub timings_s: Vec<f64>,
    pub mean_s: f64,
    /// `None` when there is a single repetition.
    pub half_width_s: Option<f64>,
}

impl BenchReport {
    pub fn new(scenario: impl Into<String>, host_count: usize, timings_s: Vec<f64>) -> Self {
        let (mean_s, half_width_s) = mean_half_width(&timings_s);
        BenchReport {
            scenario: scenario.into(),
            host_count,
            repetitions: timings_s.len(),
            timings_s,
            mean_s,
            half_width_s,
        }
    }

    /// True when the stored statistics agree with the raw timings.
    pub fn is_consistent(&self) -> bool {
        let (m, h) = mean_half_width(&self.timings_s);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(1.0);
        self.repetitions == self.timings_s.len()
            && close(m, self.mean_s)
            && match (h, self.half_width_s) {
                (None, None) => true,
                (Some(a), Some(b)) => close(a, b),
                _ => false,
            }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlBench {
    pub serial: BenchReport,
    pub parallel: BenchReport,
    /// Mean serial time over mean parallel time.
    pub speedup: f64,
}

/// Fixed-width text table of reports.
pub fn render_table(reports: &[BenchReport]) -> String {
    let mut s = format!("{:<18} {:>6} {:>5} {:>12} {:>12}\n", "scenario", "hosts", "reps", "mean (ms)", "±95% (ms)");
    for r in reports {
        let hw = r.half_width_s.map_or_else(|| "n/a".to_owned(), |h| format!("{:.3}", h * 1e3));
        s.push_str(&format!(
            "{:<18} {:>6} {:>5} {:>12.3} {:>12}\n",
            r.scenario,
            r.host_count,
            r.repetitions,
            r.mean_s * 1e3,
            hw
        ));
    }
    s
}

/// Appends one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> std::io::Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// For each size in `counts`, forms a temporary cloudlet from the first
/// `count` of `hosts` through the API, times `reps` stacked `cpu_user`
/// queries over the last hour, then deletes the cloudlet again.
pub async fn bench_query(
    client: &ApiClient,
    hosts: &[String],
    counts: &[usize],
    reps: usize,
    now: impl Fn() -> u64,
) -> Result<Vec<BenchReport>, SimError> {
    if reps == 0 {
        return Err(SimError::NoRepetitions);
    }
    let mut reports = Vec::with_capacity(counts.len());
    for &count in counts {
        if count == 0 || count > hosts.len() {
            return Err(SimError::BadCount { count, available: hosts.len() });
        }
        let name = format!("bench{count}");
        if client.delete_cloudlet(&name).await.is_err() {
            // nothing left over from an earlier run
        }
        client.create_cloudlet(&name).await?;
        let result = time_queries(client, &name, &hosts[..count], reps, &now).await;
        client.delete_cloudlet(&name).await?;
        reports.push(BenchReport::new("query", count, result?));
    }
    Ok(reports)
}

async fn time_queries(
    client: &ApiClient,
    cloudlet: &str,
    members: &[String],
    reps: usize,
    now: &impl Fn() -> u64,
) -> Result<Vec<f64>, SimError> {
    for h in members {
        client.add_member(cloudlet, h).await?;
    }
    let scope = format!("cloudlet:{cloudlet}");
    let mut timings = Vec::with_capacity(reps);
    for _ in 0..reps {
        let end = now() + 1;
        let t0 = Instant::now();
        let s = client.series(&scope, QUERY_METRIC, end.saturating_sub(QUERY_WINDOW), end).await?;
        timings.push(t0.elapsed().as_secs_f64());
        if s.coverage.iter().all(|&c| c == 0) {
            return Err(SimError::InsufficientData(scope));
        }
    }
    Ok(timings)
}

/// Runs `sleep task_secs` on `host_count` synthetic local targets, `reps`
/// times serially and then `reps` times in parallel.
pub async fn bench_control(
    engine: &ControlEngine,
    host_count: usize,
    task_secs: f64,
    reps: usize,
) -> Result<ControlBench, SimError> {
    if host_count == 0 {
        return Err(SimError::NoAgents);
    }
    if reps == 0 {
        return Err(SimError::NoRepetitions);
    }
    let targets: Vec<String> = (0..host_count).map(|i| synthetic_hostname("sim", i)).collect();
    let command = format!("sleep {task_secs}");
    let run = async |mode: Mode| -> Result<Vec<f64>, SimError> {
        let mut out = Vec::with_capacity(reps);
        for _ in 0..reps {
            let id = engine.submit(JobRequest::new(targets.clone(), command.clone(), mode))?;
            engine.await_job(&id).await?;
            let wall = engine.job(&id)?.wall_time().expect("finished job has timings");
            out.push(wall.as_secs_f64());
        }
        Ok(out)
    };
    let serial = BenchReport::new("control-serial", host_count, run(Mode::Serial).await?);
    let parallel = BenchReport::new("control-parallel", host_count, run(Mode::Parallel).await?);
    let speedup = serial.mean_s / parallel.mean_s;
    Ok(ControlBench { serial, parallel, speedup })
}
