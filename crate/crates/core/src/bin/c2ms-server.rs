//! Central server: UDP ingest, round-robin store, cloudlet registry, PDU
//! polling, control engine and HTTP API.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::Parser;
use tokio::net::{TcpListener, UdpSocket};

use c2ms::agent::Shutdown;
use c2ms::aggregator::listener::serve_udp;
use c2ms::aggregator::pdu::{poll_forever, PduClient, PduMapping, DEFAULT_POLL_INTERVAL};
use c2ms::aggregator::rack::RackLayout;
use c2ms::aggregator::{Aggregator, HostTable, DEFAULT_DOWN_THRESHOLD};
use c2ms::api::auth::Auth;
use c2ms::api::{self, ApiState, ClassThresholds};
use c2ms::clock::SystemClock;
use c2ms::conf::KeyValues;
use c2ms::control::{ControlEngine, EngineConfig, Palette, SshParams, Transport};
use c2ms::registry::Registry;
use c2ms::rrd::RrdStore;

const KEYS: &[&str] = &[
    "udp_listen",
    "http_listen",
    "clusters_file",
    "snapshot_file",
    "snapshot_interval",
    "credentials_file",
    "admin_user",
    "palette_file",
    "rack_layout_file",
    "pdu_map_file",
    "pdu_endpoint",
    "pdu_poll_interval",
    "down_threshold",
    "allow_all_scope",
    "static_dir",
    "transport",
    "ssh_program",
    "ssh_user",
    "ssh_identity",
    "ssh_connect_timeout",
    "fanout_limit",
    "target_timeout",
    "result_ttl",
    "cpu_amber",
    "cpu_red",
    "net_amber",
    "net_red",
];

#[derive(Parser, Debug)]
#[command(version, about = "Aggregator, registry, control engine and HTTP API")]
struct Args {
    /// Key/value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Password used to create the credentials file when it does not exist.
    #[arg(long, env = "C2MS_ADMIN_PASSWORD", hide_env_values = true)]
    init_password: Option<String>,
}

struct Settings(KeyValues);

impl Settings {
    fn str<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.0.get(key).unwrap_or(default)
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.0.get(key).map(PathBuf::from)
    }

    fn num<T: std::str::FromStr>(&self, key: &str, default: T) -> anyhow::Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.0.parsed(key)?.unwrap_or(default))
    }
}

fn load_snapshot(path: &Path) -> anyhow::Result<Option<RrdStore>> {
    match std::fs::File::open(path) {
        Ok(f) => Ok(Some(
            RrdStore::read_snapshot(std::io::BufReader::new(f)).with_context(|| format!("{}", path.display()))?,
        )),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e).with_context(|| format!("{}", path.display())),
    }
}

fn save_snapshot(store: &RrdStore, path: &Path) -> anyhow::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    let mut buf = Vec::new();
    store.write_snapshot(&mut buf)?;
    std::io::Write::write_all(&mut tmp, &buf)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)?;
    Ok(())
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt().with_env_filter(tracing_subscriber::EnvFilter::from_default_env()).init();
    let args = Args::parse();
    let kv = match &args.config {
        Some(p) => KeyValues::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => KeyValues::default(),
    };
    if let Some(k) = kv.keys().find(|k| !KEYS.contains(k)) {
        bail!("unknown config key {k:?}");
    }
    let s = Settings(kv);

    let registry = match s.path("clusters_file") {
        Some(p) => Registry::open(p)?,
        None => Registry::in_memory(),
    };
    let snapshot_file = s.path("snapshot_file");
    let store = match &snapshot_file {
        Some(p) => load_snapshot(p)?.unwrap_or_default(),
        None => RrdStore::default(),
    };
    let aggregator = Arc::new(Aggregator::new(
        Arc::new(store),
        Arc::new(registry),
        Arc::new(HostTable::default()),
        Arc::new(SystemClock),
        s.num("down_threshold", DEFAULT_DOWN_THRESHOLD)?,
    ));

    let transport = match s.str("transport", "ssh") {
        "local" => Transport::Local,
        "ssh" => Transport::Ssh(SshParams {
            program: s.str("ssh_program", "ssh").to_owned(),
            user: s.0.get("ssh_user").map(str::to_owned),
            identity: s.path("ssh_identity"),
            connect_timeout: Duration::from_secs(s.num("ssh_connect_timeout", 10)?),
        }),
        other => bail!("transport must be ssh or local, not {other:?}"),
    };
    let defaults = EngineConfig::default();
    let control = Arc::new(ControlEngine::new(EngineConfig {
        fanout_limit: s.num("fanout_limit", defaults.fanout_limit)?,
        per_target_timeout: Duration::from_secs(s.num("target_timeout", defaults.per_target_timeout.as_secs())?),
        result_ttl: Duration::from_secs(s.num("result_ttl", defaults.result_ttl.as_secs())?),
        output_cap: defaults.output_cap,
    }));

    let cred_path = s.path("credentials_file").unwrap_or_else(|| PathBuf::from("credentials"));
    let user = s.str("admin_user", "admin").to_owned();
    let auth = Auth::open(&cred_path, args.init_password.as_deref().map(|p| (user.as_str(), p)))?;

    let mut state = ApiState::new(aggregator.clone(), control, Arc::new(auth));
    if let Some(p) = s.path("palette_file") {
        state.palette = Palette::load(&p)?;
    }
    if let Some(p) = s.path("rack_layout_file") {
        state.layout = Some(RackLayout::load(&p)?);
    }
    state.transport = transport;
    state.allow_all_scope = s.num("allow_all_scope", false)?;
    let t = ClassThresholds::default();
    state.thresholds = ClassThresholds {
        cpu_amber: s.num("cpu_amber", t.cpu_amber)?,
        cpu_red: s.num("cpu_red", t.cpu_red)?,
        net_amber: s.num("net_amber", t.net_amber)?,
        net_red: s.num("net_red", t.net_red)?,
    };

    let (shutdown, rx) = Shutdown::new();
    let udp = UdpSocket::bind(s.str("udp_listen", "0.0.0.0:8649")).await.context("binding UDP")?;
    let http = TcpListener::bind(s.str("http_listen", "127.0.0.1:8080")).await.context("binding HTTP")?;
    tracing::info!(udp = %udp.local_addr()?, http = %http.local_addr()?, "server listening");
    let mut tasks = vec![tokio::spawn(serve_udp(aggregator.clone(), udp, rx.clone()))];

    if let Some(p) = s.path("pdu_map_file") {
        let mapping = PduMapping::load(&p)?;
        let Some(endpoint) = s.0.get("pdu_endpoint") else { bail!("pdu_map_file needs pdu_endpoint") };
        let every = Duration::from_secs(s.num("pdu_poll_interval", DEFAULT_POLL_INTERVAL.as_secs())?);
        let poller = tokio::spawn(poll_forever(aggregator.clone(), mapping, PduClient::new(endpoint), every));
        let mut stop = rx.clone();
        tasks.push(tokio::spawn(async move {
            let _ = stop.wait_for(|s| *s).await;
            poller.abort();
        }));
    }

    if let Some(path) = snapshot_file.clone() {
        let every = Duration::from_secs(s.num("snapshot_interval", 300u64)?.max(1));
        let (agg, mut stop) = (aggregator.clone(), rx.clone());
        tasks.push(tokio::spawn(async move {
            let mut tick = tokio::time::interval(every);
            tick.tick().await;
            loop {
                tokio::select! {
                    _ = tick.tick() => {
                        if let Err(e) = save_snapshot(agg.store(), &path) {
                            tracing::warn!(error = %e, "snapshot failed");
                        }
                    }
                    _ = stop.wait_for(|s| *s) => break,
                }
            }
        }));
    }

    tokio::spawn(async move {
        let _ = tokio::signal::ctrl_c().await;
        tracing::info!("shutting down");
        shutdown.trigger();
    });
    api::serve(http, api::router(Arc::new(state), s.path("static_dir")), rx).await?;
    for t in tasks {
        let _ = t.await;
    }
    if let Some(p) = snapshot_file {
        save_snapshot(aggregator.store(), &p)?;
    }
    Ok(())
}
