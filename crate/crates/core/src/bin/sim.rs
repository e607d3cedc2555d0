//! Simulation harness: agent fleets, a simulated PDU and the query and
//! control benchmarks.

use std::path::PathBuf;
use std::time::Duration;

use anyhow::Context;
use clap::{Args as ClapArgs, Parser, Subcommand};

use c2ms::agent::split_list;
use c2ms::aggregator::pdu::SimulatedPdu;
use c2ms::clock::{Clock, SystemClock};
use c2ms::control::{ControlEngine, EngineConfig};
use c2ms::sim::bench::{self, render_table, write_jsonl, BenchReport, CONTROL_REPS, QUERY_REPS};
use c2ms::sim::{FleetOptions, ProfileKind, SimFleet, SimProfile, Testbed, TestbedOptions};

#[derive(Parser, Debug)]
#[command(version, about = "Simulated fleets and benchmarks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Runs simulated agents against an aggregator until interrupted.
    Agents {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value = "constant:10")]
        profile: ProfileKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "127.0.0.1:8649")]
        aggregator: String,
        #[command(flatten)]
        fleet: FleetArgs,
    },
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Serves the PDU line protocol with a fixed reading on every outlet.
    Pdu {
        #[arg(long, default_value_t = 150.0)]
        watts_per_outlet: f64,
        #[arg(long, default_value = "127.0.0.1:7070")]
        listen: String,
    },
}

#[derive(ClapArgs, Debug)]
struct FleetArgs {
    #[arg(long, default_value_t = c2ms::agent::DEFAULT_HEARTBEAT_INTERVAL)]
    heartbeat_interval: u64,
    #[arg(long, default_value_t = c2ms::agent::DEFAULT_METRIC_INTERVAL)]
    metric_interval: u64,
    /// cpu_num reported by each agent.
    #[arg(long, default_value_t = 1)]
    cpus: u32,
}

impl FleetArgs {
    fn options(&self) -> FleetOptions {
        FleetOptions {
            heartbeat_interval: self.heartbeat_interval,
            metric_interval: self.metric_interval,
            cpu_num: self.cpus,
            ..FleetOptions::default()
        }
    }
}

#[derive(Subcommand, Debug)]
enum BenchCmd {
    /// Times stacked cloudlet queries through the HTTP API for growing
    /// cloudlet sizes, against an in-process server and fleet.
    Query {
        /// Comma-separated cloudlet sizes.
        #[arg(long, default_value = "10,20,30,40,50,60,70,80,90,100,110,120,130")]
        counts: String,
        #[arg(long, default_value_t = QUERY_REPS)]
        reps: usize,
        /// Seconds of agent traffic before the first query.
        #[arg(long, default_value_t = 30)]
        warmup: u64,
        #[arg(long, default_value = "constant:10")]
        profile: ProfileKind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serial against parallel `sleep` over local targets.
    Control {
        #[arg(long)]
        hosts: usize,
        #[arg(long, default_value_t = 1.0)]
        task_secs: f64,
        #[arg(long, default_value_t = CONTROL_REPS)]
        reps: usize,
        #[arg(long, default_value_t = c2ms::control::DEFAULT_FANOUT_LIMIT)]
        fanout: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(reports: &[BenchReport], out: Option<&PathBuf>) -> anyhow::Result<()> {
    print!("{}", render_table(reports));
    if let Some(p) = out {
        write_jsonl(p, reports).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

async fn ctrl_c() {
    let _ = tokio::signal::ctrl_c().await;
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt().with_env_filter(tracing_subscriber::EnvFilter::from_default_env()).init();
    match Cli::parse().cmd {
        Cmd::Agents { count, profile, seed, aggregator, fleet } => {
            let p = SimProfile { kind: profile, seed };
            let fleet = SimFleet::spawn_agents(count, &p, &aggregator, fleet.options()).await?;
            println!("{} agents sending to {aggregator}; Ctrl-C to stop", fleet.len());
            ctrl_c().await;
            fleet.shutdown().await;
        }
        Cmd::Bench(BenchCmd::Query { counts, reps, warmup, profile, out }) => {
            let counts: Vec<usize> =
                split_list(&counts).iter().map(|c| c.parse()).collect::<Result<_, _>>().context("--counts")?;
            let max = counts.iter().copied().max().unwrap_or(0);
            let tb = Testbed::start(TestbedOptions::default()).await?;
            let fleet = SimFleet::spawn_agents(
                max,
                &SimProfile { kind: profile, seed: 0 },
                &tb.udp_addr.to_string(),
                FleetOptions::default(),
            )
            .await?;
            eprintln!("{max} agents running; warming up for {warmup} s");
            tokio::time::sleep(Duration::from_secs(warmup)).await;
            let client = tb.client().await?;
            let reports = bench::bench_query(&client, &fleet.hostnames(), &counts, reps, || SystemClock.now()).await?;
            emit(&reports, out.as_ref())?;
            fleet.shutdown().await;
            tb.stop().await;
        }
        Cmd::Bench(BenchCmd::Control { hosts, task_secs, reps, fanout, out }) => {
            let engine = ControlEngine::new(EngineConfig { fanout_limit: fanout, ..EngineConfig::default() });
            let b = bench::bench_control(&engine, hosts, task_secs, reps).await?;
            emit(&[b.serial.clone(), b.parallel.clone()], out.as_ref())?;
            println!("speedup {:.2}", b.speedup);
            if let Some(p) = &out {
                write_jsonl(
                    p,
                    &[serde_json::json!({ "scenario": "control-speedup", "host_count": hosts, "speedup": b.speedup })],
                )?;
            }
        }
        Cmd::Pdu { watts_per_outlet, listen } => {
            let (addr, task) = SimulatedPdu::new(Some(watts_per_outlet)).bind(&listen).await?;
            println!("simulated PDU on {addr}, {watts_per_outlet} W per outlet; Ctrl-C to stop");
            ctrl_c().await;
            task.abort();
        }
    }
    Ok(())
}
