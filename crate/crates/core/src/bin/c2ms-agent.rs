//! Per-host agent: samples local metrics and streams them to the aggregator.

use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;

use c2ms::agent::{build_collectors, run_loop, split_list, Agent, AgentConfig, Shutdown};
use c2ms::conf::KeyValues;
use c2ms::sim::profile::{ProfileKind, SimProfile};

#[derive(Parser, Debug)]
#[command(version, about = "Metrics agent: heartbeats and metric samples over UDP")]
struct Args {
    /// Key/value config file (aggregator, heartbeat_interval, metric_interval,
    /// hostname, collectors, profile, seed).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Aggregator address, host:port.
    #[arg(long)]
    aggregator: Option<String>,
    #[arg(long)]
    hostname: Option<String>,
    /// Seconds between heartbeats.
    #[arg(long)]
    heartbeat_interval: Option<u64>,
    /// Seconds between metric collections.
    #[arg(long)]
    metric_interval: Option<u64>,
    /// Comma-separated collectors: core, temperature, simulated.
    #[arg(long)]
    collectors: Option<String>,
    /// Value profile for the simulated collector, e.g. constant:10 or sine:50:20:300.
    #[arg(long)]
    profile: Option<ProfileKind>,
    #[arg(long)]
    seed: Option<u64>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt().with_env_filter(tracing_subscriber::EnvFilter::from_default_env()).init();
    let args = Args::parse();

    let mut cfg = AgentConfig::default();
    let mut profile = SimProfile::constant(10.0);
    if let Some(path) = &args.config {
        let kv = KeyValues::load(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply(&kv)?;
        if let Some(p) = kv.parsed::<ProfileKind>("profile")? {
            profile.kind = p;
        }
        if let Some(s) = kv.parsed("seed")? {
            profile.seed = s;
        }
    }
    cfg.apply_env();
    if let Some(a) = args.aggregator {
        cfg.aggregator = a;
    }
    if let Some(h) = args.hostname {
        cfg.hostname = Some(h);
    }
    if let Some(v) = args.heartbeat_interval {
        cfg.heartbeat_interval = v;
    }
    if let Some(v) = args.metric_interval {
        cfg.metric_interval = v;
    }
    if let Some(c) = args.collectors {
        cfg.collectors = split_list(&c);
    }
    if let Some(p) = args.profile {
        profile.kind = p;
    }
    if let Some(s) = args.seed {
        profile.seed = s;
    }

    let collectors = build_collectors(&cfg.collectors, Some(&profile))?;
    let agent = Agent::new(cfg, collectors)?;
    tracing::info!(host = agent.hostname(), aggregator = %agent.config().aggregator, "agent starting");

    let (shutdown, rx) = Shutdown::new();
    tokio::spawn(async move {
        let _ = tokio::signal::ctrl_c().await;
        shutdown.trigger();
    });
    run_loop(agent, rx).await?;
    Ok(())
}
