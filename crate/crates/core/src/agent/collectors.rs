use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::protocol::{MetricSample, Slope};
use crate::sim::profile::{ProfileSampler, SimProfile};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CollectorError {
    #[error("{source_name}: {msg}")]
    Source { source_name: &'static str, msg: String },
    #[error("temperature sensor unavailable: {0}")]
    SensorUnavailable(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetricDescriptor {
    pub name: &'static str,
    pub units: &'static str,
    pub slope: Slope,
}

const fn gauge(name: &'static str, units: &'static str) -> MetricDescriptor {
    MetricDescriptor { name, units, slope: Slope::Both }
}

pub const CORE_METRICS: &[MetricDescriptor] = &[
    gauge("cpu_user", "%"),
    gauge("cpu_system", "%"),
    gauge("cpu_idle", "%"),
    gauge("load_one", ""),
    gauge("mem_total", "KB"),
    gauge("mem_free", "KB"),
    MetricDescriptor { name: "bytes_in", units: "B/s", slope: Slope::Positive },
    MetricDescriptor { name: "bytes_out", units: "B/s", slope: Slope::Positive },
    MetricDescriptor { name: "cpu_num", units: "CPUs", slope: Slope::Zero },
];

pub const TEMPERATURE_METRICS: &[MetricDescriptor] = &[gauge("cpu_temp", "C")];

/// Values a collector produced this tick plus whatever went wrong; a failing
/// source never hides the others' samples.
#[derive(Debug, Default)]
pub struct Collected {
    pub samples: Vec<MetricSample>,
    pub errors: Vec<CollectorError>,
}

impl Collected {
    fn push(&mut self, host: &str, now: u64, d: &MetricDescriptor, value: f64) {
        self.samples.push(MetricSample {
            hostname: host.to_owned(),
            name: d.name.to_owned(),
            value,
            units: d.units.to_owned(),
            slope: d.slope,
            timestamp: now,
        });
    }

    fn by_name(&mut self, host: &str, now: u64, table: &[MetricDescriptor], name: &str, value: f64) {
        let d = table.iter().find(|d| d.name == name).expect("metric declared in table");
        self.push(host, now, d, value);
    }
}

pub trait Collector: Send + Sync {
    fn name(&self) -> &str;
    fn metrics(&self) -> &[MetricDescriptor];
    fn collect(&mut self, host: &str, now: u64) -> Collected;
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct CpuTimes {
    user: u64,
    system: u64,
    idle: u64,
}

impl CpuTimes {
    fn total(&self) -> u64 {
        self.user + self.system + self.idle
    }
}

/// Parses the aggregate `cpu` line of `/proc/stat` and counts `cpuN` lines.
fn parse_proc_stat(text: &str) -> Option<(CpuTimes, u32)> {
    let mut agg = None;
    let mut cores = 0;
    for line in text.lines() {
        let mut f = line.split_whitespace();
        match f.next() {
            Some("cpu") => {
                let v: Vec<u64> = f.take(8).filter_map(|x| x.parse().ok()).collect();
                if v.len() < 4 {
                    return None;
                }
                let at = |i: usize| v.get(i).copied().unwrap_or(0);
                // user nice system idle iowait irq softirq steal
                agg =
                    Some(CpuTimes { user: at(0) + at(1), system: at(2) + at(5) + at(6) + at(7), idle: at(3) + at(4) });
            }
            Some(tag) if tag.starts_with("cpu") && tag[3..].bytes().all(|b| b.is_ascii_digit()) => cores += 1,
            _ => {}
        }
    }
    agg.map(|a| (a, cores))
}

fn parse_meminfo(text: &str) -> Option<(f64, f64)> {
    let field = |key: &str| {
        text.lines()
            .find_map(|l| l.strip_prefix(key))
            .and_then(|rest| rest.split_whitespace().next())
            .and_then(|v| v.parse::<f64>().ok())
    };
    Some((field("MemTotal:")?, field("MemFree:")?))
}

/// Total received and transmitted bytes over all non-loopback interfaces.
fn parse_net_dev(text: &str) -> Option<(u64, u64)> {
    let mut rx = 0u64;
    let mut tx = 0u64;
    let mut seen = false;
    for line in text.lines().skip(2) {
        let Some((iface, rest)) = line.split_once(':') else { continue };
        if iface.trim() == "lo" {
            continue;
        }
        let cols: Vec<u64> = rest.split_whitespace().filter_map(|c| c.parse().ok()).collect();
        if cols.len() < 9 {
            return None;
        }
        rx = rx.wrapping_add(cols[0]);
        tx = tx.wrapping_add(cols[8]);
        seen = true;
    }
    seen.then_some((rx, tx))
}

/// Core CPU, load, memory and network metrics from procfs.
///
/// CPU percentages are computed from the difference between consecutive
/// `/proc/stat` reads (the first read is measured against boot). Network
/// counters are differenced into rates, so the first tick emits none.
pub struct ProcCollector {
    root: PathBuf,
    prev_cpu: CpuTimes,
    prev_net: Option<(u64, u64, u64)>,
}

impl ProcCollector {
    pub fn new() -> Self {
        Self::with_root("/")
    }

    /// Reads `<root>/proc/...`, for fixtures.
    pub fn with_root(root: impl Into<PathBuf>) -> Self {
        ProcCollector { root: root.into(), prev_cpu: CpuTimes::default(), prev_net: None }
    }

    fn read(&self, rel: &str) -> Result<String, CollectorError> {
        fs::read_to_string(self.root.join(rel))
            .map_err(|e| CollectorError::Source { source_name: "procfs", msg: format!("{rel}: {e}") })
    }
}

impl Default for ProcCollector {
    fn default() -> Self {
        Self::new()
    }
}

fn source_err(source_name: &'static str, msg: impl Into<String>) -> CollectorError {
    CollectorError::Source { source_name, msg: msg.into() }
}

impl Collector for ProcCollector {
    fn name(&self) -> &str {
        "core"
    }

    fn metrics(&self) -> &[MetricDescriptor] {
        CORE_METRICS
    }

    fn collect(&mut self, host: &str, now: u64) -> Collected {
        let mut out = Collected::default();
        let t = CORE_METRICS;

        match self
            .read("proc/stat")
            .and_then(|s| parse_proc_stat(&s).ok_or_else(|| source_err("cpu", "unparseable /proc/stat")))
        {
            Ok((cpu, cores)) => {
                let prev = self.prev_cpu;
                let delta = CpuTimes {
                    user: cpu.user.saturating_sub(prev.user),
                    system: cpu.system.saturating_sub(prev.system),
                    idle: cpu.idle.saturating_sub(prev.idle),
                };
                self.prev_cpu = cpu;
                let total = delta.total();
                if total == 0 {
                    out.errors.push(source_err("cpu", "no cpu time elapsed since last read"));
                } else {
                    let pct = |x: u64| 100.0 * x as f64 / total as f64;
                    out.by_name(host, now, t, "cpu_user", pct(delta.user));
                    out.by_name(host, now, t, "cpu_system", pct(delta.system));
                    out.by_name(host, now, t, "cpu_idle", pct(delta.idle));
                }
                out.by_name(host, now, t, "cpu_num", cores as f64);
            }
            Err(e) => out.errors.push(e),
        }

        match self.read("proc/loadavg") {
            Ok(s) => match s.split_whitespace().next().and_then(|v| v.parse::<f64>().ok()) {
                Some(v) if v.is_finite() && v >= 0.0 => out.by_name(host, now, t, "load_one", v),
                _ => out.errors.push(source_err("load", "unparseable /proc/loadavg")),
            },
            Err(e) => out.errors.push(e),
        }

        match self.read("proc/meminfo") {
            Ok(s) => match parse_meminfo(&s) {
                Some((total, free)) => {
                    out.by_name(host, now, t, "mem_total", total);
                    out.by_name(host, now, t, "mem_free", free);
                }
                None => out.errors.push(source_err("memory", "unparseable /proc/meminfo")),
            },
            Err(e) => out.errors.push(e),
        }

        match self.read("proc/net/dev") {
            Ok(s) => match parse_net_dev(&s) {
                Some((rx, tx)) => {
                    if let Some((prx, ptx, pt)) = self.prev_net {
                        let dt = now.saturating_sub(pt);
                        // counter reset or wrap: skip one rate
                        if dt > 0 && rx >= prx && tx >= ptx {
                            out.by_name(host, now, t, "bytes_in", (rx - prx) as f64 / dt as f64);
                            out.by_name(host, now, t, "bytes_out", (tx - ptx) as f64 / dt as f64);
                        }
                    }
                    if self.prev_net.is_none_or(|(_, _, pt)| now > pt) {
                        self.prev_net = Some((rx, tx, now));
                    }
                }
                None => out.errors.push(source_err("network", "unparseable /proc/net/dev")),
            },
            Err(e) => out.errors.push(e),
        }
        out
    }
}

/// Where package temperatures come from.
pub trait SensorSource: Send + Sync {
    /// One reading in degrees Celsius per CPU package.
    fn read_celsius(&mut self) -> Result<Vec<f64>, CollectorError>;
}

/// Digital thermal sensor values exposed by the kernel (millidegrees).
pub struct SysfsSensor {
    paths: Vec<PathBuf>,
}

impl SysfsSensor {
    pub fn new(paths: Vec<PathBuf>) -> Self {
        SysfsSensor { paths }
    }

    /// Package sensors of the `coretemp` hwmon driver, falling back to
    /// `x86_pkg_temp` thermal zones.
    pub fn discover(sys: &Path) -> Self {
        let mut paths = Vec::new();
        if let Ok(entries) = fs::read_dir(sys.join("class/hwmon")) {
            let mut dirs: Vec<_> = entries.flatten().map(|e| e.path()).collect();
            dirs.sort();
            for dir in dirs {
                if fs::read_to_string(dir.join("name")).map(|n| n.trim() == "coretemp").unwrap_or(false) {
                    for i in 1..64 {
                        let label = fs::read_to_string(dir.join(format!("temp{i}_label"))).unwrap_or_default();
                        if label.starts_with("Package id") {
                            paths.push(dir.join(format!("temp{i}_input")));
                        }
                    }
                }
            }
        }
        if paths.is_empty() {
            if let Ok(entries) = fs::read_dir(sys.join("class/thermal")) {
                let mut zones: Vec<_> = entries.flatten().map(|e| e.path()).collect();
                zones.sort();
                for z in zones {
                    if fs::read_to_string(z.join("type")).map(|t| t.trim() == "x86_pkg_temp").unwrap_or(false) {
                        paths.push(z.join("temp"));
                    }
                }
            }
        }
        SysfsSensor { paths }
    }
}

impl SensorSource for SysfsSensor {
    fn read_celsius(&mut self) -> Result<Vec<f64>, CollectorError> {
        if self.paths.is_empty() {
            return Err(CollectorError::SensorUnavailable("no package sensor found".into()));
        }
        self.paths
            .iter()
            .map(|p| {
                let raw = fs::read_to_string(p)
                    .map_err(|e| CollectorError::SensorUnavailable(format!("{}: {e}", p.display())))?;
                raw.trim()
                    .parse::<f64>()
                    .map(|milli| milli / 1000.0)
                    .map_err(|_| CollectorError::SensorUnavailable(format!("{}: unparseable", p.display())))
            })
            .collect()
    }
}

/// A sensor stuck at fixed values, one per package.
pub struct FixedSensor(pub Vec<f64>);

impl SensorSource for FixedSensor {
    fn read_celsius(&mut self) -> Result<Vec<f64>, CollectorError> {
        Ok(self.0.clone())
    }
}

pub const TEMP_RANGE: std::ops::RangeInclusive<f64> = 0.0..=150.0;

/// Emits `cpu_temp` for package 0 and `cpu_temp_<n>` for further packages.
pub struct TemperatureCollector {
    source: Box<dyn SensorSource>,
    unavailable: Arc<AtomicU64>,
}

impl TemperatureCollector {
    pub fn new(source: impl SensorSource + 'static) -> Self {
        TemperatureCollector { source: Box::new(source), unavailable: Arc::default() }
    }

    /// Count of ticks where the sensor could not produce a usable reading.
    pub fn unavailable_counter(&self) -> Arc<AtomicU64> {
        self.unavailable.clone()
    }
}

impl Collector for TemperatureCollector {
    fn name(&self) -> &str {
        "temperature"
    }

    fn metrics(&self) -> &[MetricDescriptor] {
        TEMPERATURE_METRICS
    }

    fn collect(&mut self, host: &str, now: u64) -> Collected {
        let mut out = Collected::default();
        match self.source.read_celsius() {
            Ok(readings) => {
                for (pkg, v) in readings.into_iter().enumerate() {
                    if !v.is_finite() || !TEMP_RANGE.contains(&v) {
                        self.unavailable.fetch_add(1, Ordering::Relaxed);
                        out.errors.push(CollectorError::SensorUnavailable(format!("package {pkg} reported {v}")));
                        continue;
                    }
                    let name = if pkg == 0 { "cpu_temp".to_owned() } else { format!("cpu_temp_{pkg}") };
                    out.samples.push(MetricSample {
                        hostname: host.to_owned(),
                        name,
                        value: v,
                        units: "C".into(),
                        slope: Slope::Both,
                        timestamp: now,
                    });
                }
            }
            Err(e) => {
                self.unavailable.fetch_add(1, Ordering::Relaxed);
                out.errors.push(e);
            }
        }
        out
    }
}

/// Profile-driven stand-in for [`ProcCollector`].
///
/// The profile drives `cpu_user`; the rest of the core set is derived from
/// it so the usual relationships hold (percentages sum to 100, free memory
/// shrinks as load grows).
pub struct SimulatedCollector {
    sampler: ProfileSampler,
    cpu_num: u32,
    mem_total_kb: f64,
}

impl SimulatedCollector {
    pub fn new(profile: &SimProfile, cpu_num: u32) -> Self {
        SimulatedCollector { sampler: profile.sampler(), cpu_num, mem_total_kb: 4_194_304.0 }
    }
}

impl Collector for SimulatedCollector {
    fn name(&self) -> &str {
        "simulated"
    }

    fn metrics(&self) -> &[MetricDescriptor] {
        CORE_METRICS
    }

    fn collect(&mut self, host: &str, now: u64) -> Collected {
        let mut out = Collected::default();
        let t = CORE_METRICS;
        let user = self.sampler.next(now).clamp(0.0, 100.0);
        let load = user / 100.0;
        out.by_name(host, now, t, "cpu_user", user);
        out.by_name(host, now, t, "cpu_system", 0.0);
        out.by_name(host, now, t, "cpu_idle", 100.0 - user);
        out.by_name(host, now, t, "load_one", load * self.cpu_num as f64);
        out.by_name(host, now, t, "mem_total", self.mem_total_kb);
        out.by_name(host, now, t, "mem_free", self.mem_total_kb * (1.0 - 0.5 * load));
        out.by_name(host, now, t, "bytes_in", 1000.0 * user);
        out.by_name(host, now, t, "bytes_out", 500.0 * user);
        out.by_name(host, now, t, "cpu_num", self.cpu_num as f64);
        out
    }
}
