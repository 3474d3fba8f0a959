//! `offrac`: run simulator experiments, the queueing oracle, the TCP server
//! and the load generator.

use std::fs::File;
use std::io::BufWriter;
use std::net::ToSocketAddrs;
use std::ops::Range;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use offrac_core::experiments::{self, manifest, manifest_from_toml, run_experiment, DEFAULT_SEEDS, SCENARIOS};
use offrac_core::oracle::{oracle_sweep, write_oracle_csv};
use offrac_net::loadgen::write_report;
use offrac_net::{run_loadgen, LoadgenConfig, Server, ServerConfig, Stop};

#[derive(Parser)]
#[command(name = "offrac", version, about = "Request reassembly dataplane: simulator, server and load generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulator scenario over a set of seeds and write CSV plus manifest.
    Sim(SimArgs),
    /// Compare Kingman's approximation with a simulated Erlang-2/D/1 queue.
    Oracle(OracleArgs),
    /// Run the TCP server until killed.
    Serve(ServeArgs),
    /// Drive a running server with closed-loop clients.
    Loadgen(LoadgenArgs),
    /// List the built-in scenarios.
    Scenarios,
}

#[derive(Args)]
struct SimArgs {
    /// Built-in scenario name.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    scenario: Option<String>,
    /// Manifest file written by a previous run (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds as `a..b` (inclusive), `a,b,c` or a single number.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    /// Service rate per microsecond.
    #[arg(long, default_value_t = 1.0)]
    mu: f64,
    #[arg(long, value_delimiter = ',', default_values_t = experiments::GD1_RHOS)]
    rhos: Vec<f64>,
    #[arg(long, default_value_t = 200_000)]
    requests: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct LoadgenArgs {
    #[arg(long, default_value = "127.0.0.1:7070")]
    addr: String,
    #[arg(long, default_value_t = 1)]
    clients: usize,
    #[arg(long)]
    accel: u16,
    /// Fragments per request.
    #[arg(long, default_value_t = 1)]
    fragments: u32,
    /// Fragment size in bytes; should match the server's `fragment_bytes`.
    #[arg(long, default_value_t = 4096)]
    bytes: usize,
    /// Run for this many seconds.
    #[arg(long, conflicts_with = "requests")]
    seconds: Option<f64>,
    /// Successful requests per client.
    #[arg(long)]
    requests: Option<u64>,
    /// Seconds of results to discard at the start.
    #[arg(long, default_value_t = 0.0)]
    warmup: f64,
    /// Output CSV; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        if b < a {
            bail!("empty seed range {text}");
        }
        return Ok((a..=b).collect());
    }
    text.split(',')
        .map(|s| s.trim().parse().with_context(|| format!("bad seed {s:?}")))
        .collect()
}

fn default_seeds() -> Vec<u64> {
    let Range { start, end } = DEFAULT_SEEDS;
    (start..end).collect()
}

fn sim(args: SimArgs) -> Result<()> {
    let mut m = match (&args.scenario, &args.config) {
        (Some(name), _) => manifest(name, &default_seeds())?,
        (None, Some(path)) => manifest_from_toml(
            &std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        )?,
        (None, None) => unreachable!("clap requires one of --scenario or --config"),
    };
    if let Some(s) = &args.seeds {
        m.seeds = parse_seeds(s)?;
    }
    let csv = run_experiment(&m, &args.out)?;
    eprintln!("wrote {}", csv.display());
    Ok(())
}

fn oracle(args: OracleArgs) -> Result<()> {
    let rows = oracle_sweep(args.mu, &args.rhos, args.requests, args.seed)?;
    match args.out {
        Some(path) => write_oracle_csv(BufWriter::new(File::create(&path)?), &rows)?,
        None => write_oracle_csv(std::io::stdout().lock(), &rows)?,
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let config = ServerConfig::load(&args.config)?;
    let server = Server::start(config)?;
    eprintln!("listening on {}", server.local_addr());
    let report = server.wait();
    eprintln!("{:?}", report.stats);
    Ok(())
}

fn loadgen(args: LoadgenArgs) -> Result<()> {
    let addr = args
        .addr
        .to_socket_addrs()?
        .next()
        .with_context(|| format!("cannot resolve {}", args.addr))?;
    let stop = match (args.seconds, args.requests) {
        (Some(s), _) => Stop::Duration(Duration::from_secs_f64(s)),
        (None, Some(n)) => Stop::Requests(n),
        (None, None) => Stop::Duration(Duration::from_secs(10)),
    };
    let mut cfg = LoadgenConfig::new(addr, args.clients, args.accel, stop);
    cfg.fragments = args.fragments;
    cfg.fragment_bytes = args.bytes;
    cfg.warmup = Duration::from_secs_f64(args.warmup);
    let report = run_loadgen(&cfg)?;
    match args.out {
        Some(path) => write_report(BufWriter::new(File::create(&path)?), &report)?,
        None => write_report(std::io::stdout().lock(), &report)?,
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Sim(a) => sim(a),
        Command::Oracle(a) => oracle(a),
        Command::Serve(a) => serve(a),
        Command::Loadgen(a) => loadgen(a),
        Command::Scenarios => {
            for s in SCENARIOS {
                println!("{s}");
            }
            Ok(())
        }
    }
}
