use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pactrain::collective::{ring_allreduce, LinkModel, TcpEndpoint, TcpOptions, WorkerTopology};
use pactrain::harness::{
    launcher_for, parse_addrs, parse_config, render_table, run_experiment, run_selftest,
    summarize_dir, tcp_worker, ExperimentConfig, TransportKind,
};
use pactrain::tensor::FlatTensor;
use pactrain::Error;

#[derive(Parser)]
#[command(
    name = "pactrain",
    version,
    about = "Pruning-aware gradient compression experiments"
)]
struct Cli {
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the transport.
    #[arg(long, global = true, value_parser = ["sim", "tcp"])]
    transport: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of an experiment config.
    Run {
        config: PathBuf,
        /// Run independent cells in parallel.
        #[arg(long)]
        parallel: bool,
    },
    /// Recompute the summary of a results directory.
    Summarize { dir: PathBuf },
    /// Run the built-in oracle checks.
    Selftest,
    /// One TCP worker process of an experiment cell.
    #[command(hide = true)]
    Worker {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        cell: usize,
        #[arg(long)]
        rank: usize,
        #[arg(long)]
        addrs: String,
        #[arg(long)]
        metrics_out: Option<PathBuf>,
    },
    /// Ring all-reduce of a seeded random tensor over TCP; writes the
    /// result as little-endian f32s.
    #[command(hide = true)]
    TcpAllreduce {
        #[arg(long)]
        rank: usize,
        #[arg(long)]
        addrs: String,
        #[arg(long, default_value_t = 4096)]
        len: usize,
        #[arg(long)]
        result: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingFile(_)
        | Error::ParseError { .. }
        | Error::UnknownKey { .. }
        | Error::InvalidConfig(_)
        | Error::InvalidRatio(_)
        | Error::InvalidRate(_)
        | Error::InvalidTopology(_) => 1,
        _ => 2,
    }
}

fn load(cli: &Cli, path: &Path) -> pactrain::Result<ExperimentConfig> {
    let mut cfg = parse_config(path)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(t) = &cli.transport {
        cfg.transport = t.parse::<TransportKind>()?;
    }
    Ok(cfg)
}

/// Seeded input of one rank for `tcp-allreduce`; tests regenerate it.
fn rank_input(rank: usize, len: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(rank as u64);
    (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn run(cli: &Cli) -> pactrain::Result<u8> {
    match &cli.command {
        Command::Run { config, parallel } => {
            let mut cfg = load(cli, config)?;
            cfg.parallel |= parallel;
            let mut base_args = vec!["worker".to_string(), "--config".into()];
            base_args.push(config.display().to_string());
            if let Some(seed) = cli.seed {
                base_args.extend(["--seed".to_string(), seed.to_string()]);
            }
            let launcher = launcher_for(&cfg, std::env::current_exe()?, base_args);
            let outcome = run_experiment(&cfg, &launcher)?;
            print!("{}", render_table(&outcome.summary, outcome.target));
            let failed = outcome.failed_cells();
            if failed > 0 {
                eprintln!("{failed} cell(s) failed; see {}", cfg.out.display());
                return Ok(2);
            }
            Ok(0)
        }
        Command::Summarize { dir } => {
            let (target, rows) = summarize_dir(dir)?;
            print!("{}", render_table(&rows, target));
            Ok(0)
        }
        Command::Selftest => {
            let results = run_selftest();
            for r in &results {
                match &r.failure {
                    None => println!("PASS {}", r.name),
                    Some(why) => println!("FAIL {}: {why}", r.name),
                }
            }
            Ok(if results.iter().all(|r| r.passed()) {
                0
            } else {
                2
            })
        }
        Command::Worker {
            config,
            cell,
            rank,
            addrs,
            metrics_out,
        } => {
            let cfg = load(cli, config)?;
            tcp_worker(
                &cfg,
                *cell,
                *rank,
                &parse_addrs(addrs)?,
                metrics_out.as_deref(),
            )?;
            Ok(0)
        }
        Command::TcpAllreduce {
            rank,
            addrs,
            len,
            result,
        } => {
            let addrs = parse_addrs(addrs)?;
            let topo = WorkerTopology::uniform(addrs.len(), *rank, LinkModel::mbps(100.0))?;
            let mut ep = TcpEndpoint::join(topo, &addrs, TcpOptions::default())?;
            let sum = ring_allreduce(&FlatTensor::new(rank_input(*rank, *len))?, &mut ep)?;
            let bytes: Vec<u8> = sum
                .as_slice()
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect();
            std::fs::write(result, bytes)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
