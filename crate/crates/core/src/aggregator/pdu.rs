//! Central power polling.
//!
//! PDUs are queried over a one-line text protocol,
//! `GET <pdu_id> <outlet>\n` answered by `<watts>\n` or `ERR <reason>\n`.
//! Readings land in the store as `power_watts` exactly like agent metrics,
//! so cloudlet power graphs come from the ordinary aggregation path.

use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::RwLock;
use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};

use super::Aggregator;
use crate::conf::strip_comment;
use crate::protocol::{valid_hostname, MetricSample, Slope};

pub const POWER_METRIC: &str = "power_watts";
pub const DEFAULT_POLL_INTERVAL: Duration = Duration::from_secs(30);
const IO_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum PduError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("PDU endpoint {0} unreachable: {1}")]
    Unreachable(String, String),
    #[error("outlet {pdu_id}/{outlet}: {msg}")]
    Outlet { pdu_id: String, outlet: u32, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PduEntry {
    pub hostname: String,
    pub mac: String,
    pub pdu_id: String,
    pub outlet: u32,
}

/// Which PDU outlet feeds which server.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PduMapping {
    pub entries: Vec<PduEntry>,
}

fn valid_mac(s: &str) -> bool {
    let parts: Vec<&str> = s.split([':', '-']).collect();
    parts.len() == 6 && parts.iter().all(|p| p.len() == 2 && p.bytes().all(|b| b.is_ascii_hexdigit()))
}

impl PduMapping {
    /// Lines of `hostname mac pdu_id outlet`, `#` comments allowed.
    pub fn parse(text: &str) -> Result<Self, PduError> {
        let mut entries = Vec::new();
        let mut hosts = HashSet::new();
        let mut outlets = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let fields: Vec<&str> = strip_comment(raw).split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let err = |msg: String| PduError::Parse { line, msg };
            let [hostname, mac, pdu_id, outlet] = fields[..] else {
                return Err(err(format!("expected 4 fields, found {}", fields.len())));
            };
            if !valid_hostname(hostname) {
                return Err(err(format!("invalid hostname {hostname:?}")));
            }
            if !valid_mac(mac) {
                return Err(err(format!("invalid MAC address {mac:?}")));
            }
            let outlet: u32 =
                outlet.parse().ok().filter(|o| *o > 0).ok_or_else(|| err(format!("invalid outlet {outlet:?}")))?;
            if !hosts.insert(hostname.to_owned()) {
                return Err(err(format!("host {hostname} mapped twice")));
            }
            if !outlets.insert((pdu_id.to_owned(), outlet)) {
                return Err(err(format!("outlet {pdu_id}/{outlet} mapped twice")));
            }
            entries.push(PduEntry { hostname: hostname.into(), mac: mac.into(), pdu_id: pdu_id.into(), outlet });
        }
        Ok(PduMapping { entries })
    }

    pub fn load(path: &Path) -> Result<Self, PduError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// One connection per poll to the PDU gateway.
#[derive(Clone, Debug)]
pub struct PduClient {
    endpoint: String,
}

impl PduClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        PduClient { endpoint: endpoint.into() }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// Reads every mapped outlet over one connection. The outer error means
    /// the gateway could not be reached at all; inner errors are per outlet.
    pub async fn read_all(&self, mapping: &PduMapping) -> Result<Vec<(String, Result<f64, PduError>)>, PduError> {
        let conn = tokio::time::timeout(IO_TIMEOUT, TcpStream::connect(&self.endpoint)).await;
        let stream = match conn {
            Ok(Ok(s)) => s,
            Ok(Err(e)) => return Err(PduError::Unreachable(self.endpoint.clone(), e.to_string())),
            Err(_) => return Err(PduError::Unreachable(self.endpoint.clone(), "connect timed out".into())),
        };
        let (rd, mut wr) = stream.into_split();
        let mut lines = BufReader::new(rd).lines();
        let mut out = Vec::with_capacity(mapping.entries.len());
        for e in &mapping.entries {
            let outlet_err = |msg: String| PduError::Outlet { pdu_id: e.pdu_id.clone(), outlet: e.outlet, msg };
            let req = format!("GET {} {}\n", e.pdu_id, e.outlet);
            let reply = async {
                wr.write_all(req.as_bytes()).await?;
                lines.next_line().await
            };
            let reading = match tokio::time::timeout(IO_TIMEOUT, reply).await {
                Ok(Ok(Some(line))) => match line.trim().parse::<f64>() {
                    Ok(w) if w.is_finite() && w >= 0.0 => Ok(w),
                    _ => Err(outlet_err(line.trim().to_owned())),
                },
                Ok(Ok(None)) => {
                    out.push((e.hostname.clone(), Err(outlet_err("connection closed".into()))));
                    break;
                }
                Ok(Err(io)) => Err(outlet_err(io.to_string())),
                Err(_) => Err(outlet_err("timed out".into())),
            };
            out.push((e.hostname.clone(), reading));
        }
        Ok(out)
    }
}

impl Aggregator {
    /// Polls every mapped outlet once and stores one `power_watts` sample
    /// per host that answered.
    pub async fn poll_pdu(&self, mapping: &PduMapping, client: &PduClient) -> Result<Vec<MetricSample>, PduError> {
        self.counters.pdu_polls.fetch_add(1, Ordering::Relaxed);
        let readings = match client.read_all(mapping).await {
            Ok(r) => r,
            Err(e) => {
                self.counters.pdu_unreachable.fetch_add(1, Ordering::Relaxed);
                tracing::warn!(error = %e, "PDU poll skipped");
                return Err(e);
            }
        };
        let now = self.now();
        let mut samples = Vec::new();
        for (host, reading) in readings {
            match reading {
                Ok(w) => {
                    let s = MetricSample {
                        hostname: host,
                        name: POWER_METRIC.into(),
                        value: w,
                        units: "W".into(),
                        slope: Slope::Both,
                        timestamp: now,
                    };
                    self.ingest(&s.to_datagram());
                    samples.push(s);
                }
                Err(e) => {
                    self.counters.pdu_outlet_errors.fetch_add(1, Ordering::Relaxed);
                    tracing::debug!(%host, error = %e, "PDU outlet read failed");
                }
            }
        }
        Ok(samples)
    }
}

/// Periodic poller; runs until the task is dropped or aborted.
pub async fn poll_forever(agg: Arc<Aggregator>, mapping: PduMapping, client: PduClient, every: Duration) {
    let mut tick = tokio::time::interval(every);
    tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tick.tick().await;
        let _ = agg.poll_pdu(&mapping, &client).await;
    }
}

/// In-process PDU stand-in: every outlet of every PDU reports a default
/// wattage unless overridden.
#[derive(Clone, Debug, Default)]
pub struct SimulatedPdu {
    default_watts: Option<f64>,
    outlets: Arc<RwLock<HashMap<(String, u32), f64>>>,
}

impl SimulatedPdu {
    pub fn new(default_watts: Option<f64>) -> Self {
        SimulatedPdu { default_watts, outlets: Arc::default() }
    }

    pub fn set(&self, pdu_id: &str, outlet: u32, watts: f64) {
        self.outlets.write().insert((pdu_id.to_owned(), outlet), watts);
    }

    fn answer(&self, line: &str) -> String {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts[..] {
            ["GET", pdu, outlet] => match outlet.parse::<u32>() {
                Ok(o) => match self.outlets.read().get(&(pdu.to_owned(), o)).copied().or(self.default_watts) {
                    Some(w) => format!("{w}\n"),
                    None => "ERR no such outlet\n".into(),
                },
                Err(_) => "ERR bad outlet\n".into(),
            },
            _ => "ERR bad request\n".into(),
        }
    }

    pub async fn bind(self, addr: &str) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
        let listener = TcpListener::bind(addr).await?;
        let local = listener.local_addr()?;
        Ok((local, tokio::spawn(self.serve(listener))))
    }

    pub async fn serve(self, listener: TcpListener) {
        loop {
            let Ok((stream, _)) = listener.accept().await else { continue };
            let pdu = self.clone();
            tokio::spawn(async move {
                let (rd, mut wr) = stream.into_split();
                let mut lines = BufReader::new(rd).lines();
                while let Ok(Some(line)) = lines.next_line().await {
                    if wr.write_all(pdu.answer(&line).as_bytes()).await.is_err() {
                        break;
                    }
                }
            });
        }
    }
}
