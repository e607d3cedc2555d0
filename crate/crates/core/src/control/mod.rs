//! Grouped command execution over one host or a whole cloudlet.
//!
//! A job runs one command string against an ordered, de-duplicated list of
//! targets, either one after another or concurrently under a fan-out limit.
//! Every target yields exactly one [`HostResult`], whatever goes wrong.
//!
//! Command strings reach the target shell verbatim. The engine performs no
//! quoting or filtering of any kind: whoever can submit a job can run
//! arbitrary code on every target, exactly as with a hand-typed `ssh`.

pub mod palette;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::PathBuf;
use std::process::Stdio;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt};
use tokio::process::Command;
use tokio::sync::{watch, Semaphore};

pub use palette::{Palette, PaletteEntry, PaletteParseError};

pub const DEFAULT_FANOUT_LIMIT: usize = 64;
pub const DEFAULT_TARGET_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_RESULT_TTL: Duration = Duration::from_secs(3600);
/// Per-stream capture limit.
pub const OUTPUT_CAP: usize = 1 << 20;
/// Environment variable carrying the target name for local execution.
pub const TARGET_ENV: &str = "C2MS_TARGET";

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error("no targets given")]
    EmptyTargets,
    #[error("empty command")]
    EmptyCommand,
    #[error("invalid target {0:?}")]
    InvalidTarget(String),
    #[error("fan-out limit must be positive")]
    InvalidFanout,
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("job {0} has not finished")]
    JobNotDone(String),
    #[error("jobs differ in targets, command or mode")]
    MismatchedJobs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Serial,
    Parallel,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "serial" => Ok(Mode::Serial),
            "parallel" => Ok(Mode::Parallel),
            _ => Err(format!("unknown mode {s:?}: expected serial or parallel")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Serial => "serial",
            Mode::Parallel => "parallel",
        })
    }
}

/// Key-based, non-interactive SSH.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SshParams {
    /// Client binary, `ssh` unless overridden.
    pub program: String,
    pub user: Option<String>,
    pub identity: Option<PathBuf>,
    pub connect_timeout: Duration,
}

impl Default for SshParams {
    fn default() -> Self {
        SshParams { program: "ssh".into(), user: None, identity: None, connect_timeout: Duration::from_secs(10) }
    }
}

/// OpenSSH reports its own failures with this exit status.
const SSH_FAILURE: i32 = 255;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum Transport {
    /// Runs `sh -c <command>` on this machine once per target, with the
    /// target name in `C2MS_TARGET`.
    #[default]
    Local,
    Ssh(SshParams),
}

impl Transport {
    fn command(&self, host: &str, cmd: &str) -> Command {
        match self {
            Transport::Local => {
                let mut c = Command::new("sh");
                c.arg("-c").arg(cmd).env(TARGET_ENV, host);
                c
            }
            Transport::Ssh(p) => {
                let mut c = Command::new(&p.program);
                c.arg("-o").arg("BatchMode=yes");
                c.arg("-o").arg(format!("ConnectTimeout={}", p.connect_timeout.as_secs().max(1)));
                if let Some(key) = &p.identity {
                    c.arg("-i").arg(key);
                }
                match &p.user {
                    Some(u) => c.arg(format!("{u}@{host}")),
                    None => c.arg(host),
                };
                c.arg(cmd);
                c
            }
        }
    }

    fn program(&self) -> &str {
        match self {
            Transport::Local => "sh",
            Transport::Ssh(p) => &p.program,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum Outcome {
    /// Exit status; death by signal `n` is reported as `128 + n`.
    Exited(i32),
    Timeout,
    TransportError(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct HostResult {
    pub hostname: String,
    pub outcome: Outcome,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub stdout_truncated: bool,
    pub stderr_truncated: bool,
    pub duration: Duration,
}

impl HostResult {
    pub fn succeeded(&self) -> bool {
        self.outcome == Outcome::Exited(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Pending,
    Running,
    Done,
}

/// What to run and how.
#[derive(Clone, Debug)]
pub struct JobRequest {
    pub targets: Vec<String>,
    pub command: String,
    pub mode: Mode,
    pub transport: Transport,
    /// Engine default when `None`.
    pub fanout_limit: Option<usize>,
    /// Engine default when `None`.
    pub per_target_timeout: Option<Duration>,
}

impl JobRequest {
    pub fn new(targets: impl IntoIterator<Item = impl Into<String>>, command: impl Into<String>, mode: Mode) -> Self {
        JobRequest {
            targets: targets.into_iter().map(Into::into).collect(),
            command: command.into(),
            mode,
            transport: Transport::Local,
            fanout_limit: None,
            per_target_timeout: None,
        }
    }

    pub fn transport(mut self, t: Transport) -> Self {
        self.transport = t;
        self
    }

    pub fn fanout_limit(mut self, n: usize) -> Self {
        self.fanout_limit = Some(n);
        self
    }

    pub fn per_target_timeout(mut self, d: Duration) -> Self {
        self.per_target_timeout = Some(d);
        self
    }
}

/// Point-in-time view of a job. `results[i]` belongs to `targets[i]` and is
/// filled in as soon as that target finishes.
#[derive(Clone, Debug)]
pub struct CommandJob {
    pub job_id: String,
    pub targets: Vec<String>,
    pub command: String,
    pub mode: Mode,
    pub fanout_limit: usize,
    pub per_target_timeout: Duration,
    pub state: JobState,
    pub results: Vec<Option<HostResult>>,
    pub submitted_at: Instant,
    pub started_at: Option<Instant>,
    pub finished_at: Option<Instant>,
}

impl CommandJob {
    /// From first execution to last completion.
    pub fn wall_time(&self) -> Option<Duration> {
        Some(self.finished_at?.saturating_duration_since(self.started_at?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub serial_s: f64,
    pub parallel_s: f64,
    pub speedup: f64,
}

impl SpeedupReport {
    pub fn from_durations(serial_s: f64, parallel_s: f64) -> Self {
        SpeedupReport { serial_s, parallel_s, speedup: serial_s / parallel_s }
    }
}

#[derive(Clone, Debug)]
pub struct EngineConfig {
    pub fanout_limit: usize,
    pub per_target_timeout: Duration,
    pub result_ttl: Duration,
    pub output_cap: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            fanout_limit: DEFAULT_FANOUT_LIMIT,
            per_target_timeout: DEFAULT_TARGET_TIMEOUT,
            result_ttl: DEFAULT_RESULT_TTL,
            output_cap: OUTPUT_CAP,
        }
    }
}

struct JobSlot {
    job: Mutex<CommandJob>,
    done: watch::Sender<bool>,
}

/// Job table plus executor. Submission needs a running Tokio runtime.
pub struct ControlEngine {
    config: EngineConfig,
    jobs: Mutex<HashMap<String, Arc<JobSlot>>>,
    next_id: AtomicU64,
}

impl Default for ControlEngine {
    fn default() -> Self {
        Self::new(EngineConfig::default())
    }
}

fn dedup(targets: &[String]) -> Vec<String> {
    let mut seen = HashSet::new();
    targets.iter().filter(|t| seen.insert(t.as_str())).cloned().collect()
}

impl ControlEngine {
    pub fn new(config: EngineConfig) -> Self {
        ControlEngine { config, jobs: Mutex::default(), next_id: AtomicU64::new(1) }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// Registers the job and starts it in the background; returns at once.
    pub fn submit(&self, req: JobRequest) -> Result<String, ControlError> {
        if req.command.trim().is_empty() {
            return Err(ControlError::EmptyCommand);
        }
        let targets = dedup(&req.targets);
        if targets.is_empty() {
            return Err(ControlError::EmptyTargets);
        }
        if let Some(bad) =
            targets.iter().find(|t| t.is_empty() || t.starts_with('-') || t.chars().any(char::is_whitespace))
        {
            return Err(ControlError::InvalidTarget(bad.clone()));
        }
        let fanout_limit = req.fanout_limit.unwrap_or(self.config.fanout_limit);
        if fanout_limit == 0 {
            return Err(ControlError::InvalidFanout);
        }
        self.purge_expired();

        let job_id = format!("j{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let job = CommandJob {
            job_id: job_id.clone(),
            results: vec![None; targets.len()],
            targets,
            command: req.command,
            mode: req.mode,
            fanout_limit,
            per_target_timeout: req.per_target_timeout.unwrap_or(self.config.per_target_timeout),
            state: JobState::Pending,
            submitted_at: Instant::now(),
            started_at: None,
            finished_at: None,
        };
        let slot = Arc::new(JobSlot { job: Mutex::new(job), done: watch::channel(false).0 });
        self.jobs.lock().insert(job_id.clone(), slot.clone());
        tokio::spawn(execute(slot, Arc::new(req.transport), self.config.output_cap));
        Ok(job_id)
    }

    fn slot(&self, job_id: &str) -> Result<Arc<JobSlot>, ControlError> {
        self.purge_expired();
        self.jobs.lock().get(job_id).cloned().ok_or_else(|| ControlError::UnknownJob(job_id.to_owned()))
    }

    pub fn job(&self, job_id: &str) -> Result<CommandJob, ControlError> {
        Ok(self.slot(job_id)?.job.lock().clone())
    }

    /// Waits for the job to finish; results follow target order.
    pub async fn await_job(&self, job_id: &str) -> Result<Vec<HostResult>, ControlError> {
        let slot = self.slot(job_id)?;
        let mut rx = slot.done.subscribe();
        // The sender lives in `slot`, so this cannot observe a closed channel.
        let _ = rx.wait_for(|done| *done).await;
        let job = slot.job.lock();
        Ok(job.results.iter().map(|r| r.clone().expect("finished job has every result")).collect())
    }

    pub fn speedup_report(&self, serial_job: &str, parallel_job: &str) -> Result<SpeedupReport, ControlError> {
        let s = self.job(serial_job)?;
        let p = self.job(parallel_job)?;
        for j in [&s, &p] {
            if j.state != JobState::Done {
                return Err(ControlError::JobNotDone(j.job_id.clone()));
            }
        }
        if s.targets != p.targets || s.command != p.command || s.mode != Mode::Serial || p.mode != Mode::Parallel {
            return Err(ControlError::MismatchedJobs);
        }
        let secs = |j: &CommandJob| j.wall_time().expect("finished job has timings").as_secs_f64();
        Ok(SpeedupReport::from_durations(secs(&s), secs(&p)))
    }

    /// Number of jobs currently retained.
    pub fn len(&self) -> usize {
        self.jobs.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn purge_expired(&self) {
        let ttl = self.config.result_ttl;
        self.jobs.lock().retain(|_, slot| match slot.job.lock().finished_at {
            Some(t) => t.elapsed() < ttl,
            None => true,
        });
    }
}

async fn execute(slot: Arc<JobSlot>, transport: Arc<Transport>, cap: usize) {
    let (targets, command, mode, fanout, timeout) = {
        let mut job = slot.job.lock();
        job.state = JobState::Running;
        job.started_at = Some(Instant::now());
        (job.targets.clone(), Arc::new(job.command.clone()), job.mode, job.fanout_limit, job.per_target_timeout)
    };
    let record = |i: usize, r: HostResult| slot.job.lock().results[i] = Some(r);
    match mode {
        Mode::Serial => {
            for (i, host) in targets.iter().enumerate() {
                record(i, run_target(&transport, host, &command, timeout, cap).await);
            }
        }
        Mode::Parallel => {
            let permits = Arc::new(Semaphore::new(fanout));
            let mut set = tokio::task::JoinSet::new();
            for (i, host) in targets.iter().cloned().enumerate() {
                let (permits, transport, command) = (permits.clone(), transport.clone(), command.clone());
                set.spawn(async move {
                    let _permit = permits.acquire_owned().await.expect("semaphore is never closed");
                    (i, run_target(&transport, &host, &command, timeout, cap).await)
                });
            }
            while let Some(joined) = set.join_next().await {
                match joined {
                    Ok((i, r)) => record(i, r),
                    Err(e) => tracing::error!(error = %e, "target task failed"),
                }
            }
            // A panicked task still owes its target a result.
            let mut job = slot.job.lock();
            for (i, r) in job.results.iter_mut().enumerate() {
                if r.is_none() {
                    *r = Some(HostResult {
                        hostname: targets[i].clone(),
                        outcome: Outcome::TransportError("executor task failed".into()),
                        stdout: Vec::new(),
                        stderr: Vec::new(),
                        stdout_truncated: false,
                        stderr_truncated: false,
                        duration: Duration::ZERO,
                    });
                }
            }
        }
    }
    {
        let mut job = slot.job.lock();
        job.state = JobState::Done;
        job.finished_at = Some(Instant::now());
    }
    slot.done.send_replace(true);
}

/// Reads to EOF, keeping at most `cap` bytes. Returns whether anything was
/// dropped.
async fn read_capped<R: AsyncRead + Unpin>(mut r: R, buf: &mut Vec<u8>, cap: usize) -> bool {
    let mut chunk = [0u8; 8192];
    let mut truncated = false;
    loop {
        match r.read(&mut chunk).await {
            Ok(0) | Err(_) => return truncated,
            Ok(n) => {
                let room = cap.saturating_sub(buf.len());
                buf.extend_from_slice(&chunk[..n.min(room)]);
                truncated |= n > room;
            }
        }
    }
}

#[cfg(unix)]
fn kill_group(pid: Option<u32>) {
    if let Some(pid) = pid {
        // The child leads its own process group, so this also reaches
        // anything the shell started.
        unsafe {
            libc::killpg(pid as libc::pid_t, libc::SIGKILL);
        }
    }
}

#[cfg(not(unix))]
fn kill_group(_pid: Option<u32>) {}

fn exit_code(status: std::process::ExitStatus) -> i32 {
    #[cfg(unix)]
    {
        use std::os::unix::process::ExitStatusExt;
        if let Some(sig) = status.signal() {
            return 128 + sig;
        }
    }
    status.code().unwrap_or(-1)
}

/// Runs one target to completion. Never fails: every problem becomes an
/// [`Outcome`].
pub async fn run_target(transport: &Transport, host: &str, command: &str, timeout: Duration, cap: usize) -> HostResult {
    let started = Instant::now();
    let mut result = HostResult {
        hostname: host.to_owned(),
        outcome: Outcome::Timeout,
        stdout: Vec::new(),
        stderr: Vec::new(),
        stdout_truncated: false,
        stderr_truncated: false,
        duration: Duration::ZERO,
    };
    let mut cmd = transport.command(host, command);
    cmd.stdin(Stdio::null()).stdout(Stdio::piped()).stderr(Stdio::piped()).kill_on_drop(true);
    #[cfg(unix)]
    cmd.process_group(0);
    let mut child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) => {
            result.outcome = Outcome::TransportError(format!("cannot start {}: {e}", transport.program()));
            result.duration = started.elapsed();
            return result;
        }
    };
    let pid = child.id();
    let out = child.stdout.take().expect("stdout is piped");
    let err = child.stderr.take().expect("stderr is piped");
    let (obuf, ebuf) = (&mut result.stdout, &mut result.stderr);
    let work = async { tokio::join!(read_capped(out, obuf, cap), read_capped(err, ebuf, cap), child.wait()) };
    match tokio::time::timeout(timeout, work).await {
        Ok((ot, et, status)) => {
            result.stdout_truncated = ot;
            result.stderr_truncated = et;
            result.outcome = match status {
                Ok(s) => Outcome::Exited(exit_code(s)),
                Err(e) => Outcome::TransportError(format!("wait failed: {e}")),
            };
        }
        Err(_) => {
            kill_group(pid);
            let _ = child.kill().await;
            result.outcome = Outcome::Timeout;
        }
    }
    if matches!(transport, Transport::Ssh(_)) && result.outcome == Outcome::Exited(SSH_FAILURE) {
        let detail = String::from_utf8_lossy(&result.stderr);
        let line = detail.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("ssh failed");
        result.outcome = Outcome::TransportError(line.trim().to_owned());
    }
    result.duration = started.elapsed();
    result
}
