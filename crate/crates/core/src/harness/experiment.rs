//! Runs every (bandwidth × mode × ratio) cell of an experiment and writes
//! its results directory.
//!
//! Layout of the output directory:
//!
//! * `<bandwidth>_<mode>_r<ratio>.csv`: one row per epoch,
//! * `run.meta`: target accuracy and the list of cells (TOML),
//! * `summary.csv`, `summary.txt`: TTA and speedup per cell, recomputed
//!   from the two above.

use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, TransportKind};
use super::summary::{
    read_rows, render_table, summarize, write_rows, write_summary_csv, Cell, EpochRow, RunRecord,
    SummaryRow,
};
use crate::collective::{run_simulated, TcpEndpoint, TcpOptions, WorkerTopology};
use crate::error::{Error, Result};
use crate::tensor::fnv1a64;
use crate::trainer::{run_worker, SyncStrategy, TrainConfig, TrainData};

pub const META_FILE: &str = "run.meta";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_TXT: &str = "summary.txt";

/// Fraction of the dense baseline's final accuracy used as the default
/// target.
pub const AUTO_TARGET_FRACTION: f64 = 0.9;

/// How a cell's workers are started.
#[derive(Debug, Clone)]
pub enum Launcher {
    /// One thread per worker over the simulated fabric.
    Sim,
    /// One OS process per worker on localhost. Each process is started as
    /// `exe <base_args..> --cell i --rank r --addrs a,b,.. --metrics-out f`.
    Tcp {
        exe: PathBuf,
        base_args: Vec<String>,
    },
}

/// Every cell in run order: bandwidths, then modes, then ratios. Modes
/// without a mask train dense and run once per bandwidth.
pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for &bandwidth_bps in &cfg.bandwidths {
        for &mode in &cfg.modes {
            let ratios: &[f64] = if mode.uses_mask() {
                &cfg.ratios
            } else {
                &[0.0]
            };
            for &ratio in ratios {
                out.push(Cell {
                    bandwidth_bps,
                    mode,
                    ratio,
                });
            }
        }
    }
    out
}

pub fn cell_config(cfg: &ExperimentConfig, cell: &Cell) -> TrainConfig {
    let mut train = cfg.train.clone();
    train.strategy = cell.mode;
    train.prune.ratio = cell.ratio;
    train
}

/// Stable hash of everything that determines a cell's output.
pub fn config_hash(cfg: &ExperimentConfig, cell: &Cell) -> u64 {
    let text = format!(
        "{:?}|{:?}|{:?}",
        cell_config(cfg, cell),
        cell.bandwidth_bps.to_bits(),
        cfg.latency_s.to_bits()
    );
    fnv1a64(text.as_bytes())
}

fn topology(cfg: &ExperimentConfig, cell: &Cell, rank: usize) -> Result<WorkerTopology> {
    WorkerTopology::uniform(cfg.train.workers, rank, cfg.link(cell.bandwidth_bps)?)
}

fn rank0_rows(results: Vec<Result<crate::trainer::WorkerReport>>) -> Result<Vec<EpochRow>> {
    let mut errors = Vec::new();
    let mut leader = None;
    for r in results {
        match r {
            Ok(rep) if rep.rank == 0 => leader = Some(rep),
            Ok(_) => {}
            Err(e) => errors.push(e),
        }
    }
    if !errors.is_empty() {
        let pos = errors
            .iter()
            .position(|e| !matches!(e, Error::LinkError { .. }))
            .unwrap_or(0);
        return Err(errors.swap_remove(pos));
    }
    let leader = leader.ok_or_else(|| Error::InvalidTopology("no rank 0".into()))?;
    Ok(leader.metrics.iter().map(EpochRow::from).collect())
}

/// Runs one cell and returns rank 0's per-epoch rows.
pub fn run_cell(
    cfg: &ExperimentConfig,
    index: usize,
    launcher: &Launcher,
    data: &TrainData,
) -> Result<Vec<EpochRow>> {
    let cell = cells(cfg)
        .get(index)
        .copied()
        .ok_or_else(|| Error::InvalidConfig(format!("no cell {index}")))?;
    let train = cell_config(cfg, &cell);
    match launcher {
        Launcher::Sim => {
            let topo = topology(cfg, &cell, 0)?;
            rank0_rows(run_simulated(&topo, |ep| run_worker(&train, data, ep)))
        }
        Launcher::Tcp { exe, base_args } => run_tcp_cell(cfg, index, exe, base_args),
    }
}

fn free_addrs(n: usize) -> Result<Vec<SocketAddr>> {
    let listeners = (0..n)
        .map(|_| TcpListener::bind("127.0.0.1:0"))
        .collect::<std::io::Result<Vec<_>>>()?;
    listeners
        .iter()
        .map(|l| l.local_addr().map_err(Error::from))
        .collect()
}

pub fn format_addrs(addrs: &[SocketAddr]) -> String {
    addrs
        .iter()
        .map(|a| a.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn parse_addrs(text: &str) -> Result<Vec<SocketAddr>> {
    text.split(',')
        .map(|a| {
            a.trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad address `{a}`")))
        })
        .collect()
}

fn run_tcp_cell(
    cfg: &ExperimentConfig,
    index: usize,
    exe: &Path,
    base_args: &[String],
) -> Result<Vec<EpochRow>> {
    let n = cfg.train.workers;
    let addrs = format_addrs(&free_addrs(n)?);
    let scratch = std::env::temp_dir().join(format!(
        "pactrain-{}-{index}-{}",
        std::process::id(),
        fnv1a64(addrs.as_bytes())
    ));
    std::fs::create_dir_all(&scratch)?;
    let metrics = scratch.join("rank0.csv");
    let children = (0..n)
        .map(|rank| {
            let mut cmd = Command::new(exe);
            cmd.args(base_args)
                .args(["--cell", &index.to_string(), "--rank", &rank.to_string()])
                .args(["--addrs", &addrs])
                .stdout(Stdio::null())
                .stderr(Stdio::piped());
            if rank == 0 {
                cmd.arg("--metrics-out").arg(&metrics);
            }
            cmd.spawn()
        })
        .collect::<std::io::Result<Vec<_>>>()?;
    let mut failures = Vec::new();
    for (rank, child) in children.into_iter().enumerate() {
        let out = child.wait_with_output()?;
        if !out.status.success() {
            let stderr = String::from_utf8_lossy(&out.stderr);
            failures.push(format!("rank {rank}: {}", stderr.trim()));
        }
    }
    let rows = if failures.is_empty() {
        read_rows(&metrics)
    } else {
        Err(Error::link(0, failures.join("; ")))
    };
    let _ = std::fs::remove_dir_all(&scratch);
    rows
}

/// Body of one TCP worker process: joins the ring, trains the cell and,
/// on rank 0, writes the per-epoch rows to `metrics_out`.
pub fn tcp_worker(
    cfg: &ExperimentConfig,
    index: usize,
    rank: usize,
    addrs: &[SocketAddr],
    metrics_out: Option<&Path>,
) -> Result<()> {
    let cell = cells(cfg)
        .get(index)
        .copied()
        .ok_or_else(|| Error::InvalidConfig(format!("no cell {index}")))?;
    if rank >= cfg.train.workers {
        return Err(Error::InvalidConfig(format!(
            "rank {rank} outside {} workers",
            cfg.train.workers
        )));
    }
    let train = cell_config(cfg, &cell);
    let data = TrainData::generate(&train)?;
    let endpoint = TcpEndpoint::join(topology(cfg, &cell, rank)?, addrs, TcpOptions::default())?;
    let report = run_worker(&train, &data, endpoint)?;
    if let Some(path) = metrics_out {
        let rows: Vec<EpochRow> = report.metrics.iter().map(EpochRow::from).collect();
        write_rows(path, &rows)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    name: String,
    target_accuracy: f64,
    target_source: String,
    transport: String,
    seed: u64,
    cell: Vec<MetaCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MetaCell {
    bandwidth_bps: f64,
    mode: String,
    ratio: f64,
    config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    csv: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub records: Vec<RunRecord>,
    pub target: f64,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentOutcome {
    pub fn failed_cells(&self) -> usize {
        self.records.iter().filter(|r| r.error.is_some()).count()
    }
}

/// Runs every cell, then writes CSVs, `run.meta` and the summary to
/// `cfg.out`. A failing cell is recorded and does not stop the others.
pub fn run_experiment(cfg: &ExperimentConfig, launcher: &Launcher) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let data = TrainData::generate(&cfg.train)?;
    let cells = cells(cfg);
    let run_one = |(i, cell): (usize, &Cell)| {
        RunRecord {
            cell: *cell,
            config_hash: config_hash(cfg, cell),
            rows: Vec::new(),
            error: None,
        }
        .with_result(run_cell(cfg, i, launcher, &data))
    };
    let records: Vec<RunRecord> = if cfg.parallel {
        cells.par_iter().enumerate().map(run_one).collect()
    } else {
        cells.iter().enumerate().map(run_one).collect()
    };

    let (target, source) = match cfg.target_accuracy {
        Some(t) => (t, "config"),
        None => (auto_target(cfg, &records, &data)?, "auto"),
    };

    std::fs::create_dir_all(&cfg.out)?;
    let mut meta = Meta {
        name: cfg.name.clone(),
        target_accuracy: target,
        target_source: source.into(),
        transport: cfg.transport.to_string(),
        seed: cfg.train.seed,
        cell: Vec::new(),
    };
    for rec in &records {
        let csv = match rec.error {
            None => {
                let name = format!("{}.csv", rec.cell.file_stem());
                write_rows(&cfg.out.join(&name), &rec.rows)?;
                Some(name)
            }
            Some(_) => None,
        };
        meta.cell.push(MetaCell {
            bandwidth_bps: rec.cell.bandwidth_bps,
            mode: rec.cell.mode.to_string(),
            ratio: rec.cell.ratio,
            config_hash: format!("{:016x}", rec.config_hash),
            csv,
            error: rec.error.clone(),
        });
    }
    let meta_text = toml::to_string(&meta)
        .map_err(|e| Error::InvalidConfig(format!("cannot serialise run metadata: {e}")))?;
    std::fs::write(cfg.out.join(META_FILE), meta_text)?;

    let (target, summary) = summarize_dir(&cfg.out)?;
    Ok(ExperimentOutcome {
        records,
        target,
        summary,
    })
}

impl RunRecord {
    fn with_result(mut self, result: Result<Vec<EpochRow>>) -> Self {
        match result {
            Ok(rows) => self.rows = rows,
            Err(e) => self.error = Some(e.to_string()),
        }
        self
    }
}

/// 90% of the dense Full baseline's final accuracy. Accuracy does not
/// depend on bandwidth, so any Full cell will do; without one a reference
/// run is made.
fn auto_target(cfg: &ExperimentConfig, records: &[RunRecord], data: &TrainData) -> Result<f64> {
    let from_cell = records
        .iter()
        .find(|r| r.cell.mode == SyncStrategy::Full && r.error.is_none())
        .and_then(|r| r.rows.last())
        .map(|r| r.test_acc);
    let final_acc = match from_cell {
        Some(a) => a,
        None => {
            let mut reference = cfg.clone();
            reference.modes = vec![SyncStrategy::Full];
            reference.bandwidths.truncate(1);
            let rows = run_cell(&reference, 0, &Launcher::Sim, data)?;
            rows.last().map(|r| r.test_acc).unwrap_or(0.0)
        }
    };
    Ok(AUTO_TARGET_FRACTION * final_acc)
}

fn read_meta(dir: &Path) -> Result<Meta> {
    let path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
        _ => Error::Io(e),
    })?;
    toml::from_str(&text).map_err(|e| Error::ParseError {
        line: e
            .span()
            .map_or(0, |s| text[..s.start].matches('\n').count() + 1),
        message: e.message().to_string(),
    })
}

/// Recomputes the summary of a results directory from `run.meta` and the
/// per-cell CSVs, and rewrites `summary.csv` and `summary.txt`.
pub fn summarize_dir(dir: &Path) -> Result<(f64, Vec<SummaryRow>)> {
    let meta = read_meta(dir)?;
    let mut records = Vec::with_capacity(meta.cell.len());
    for c in &meta.cell {
        let rows = match &c.csv {
            Some(name) => read_rows(&dir.join(name))?,
            None => Vec::new(),
        };
        records.push(RunRecord {
            cell: Cell {
                bandwidth_bps: c.bandwidth_bps,
                mode: c.mode.parse()?,
                ratio: c.ratio,
            },
            config_hash: u64::from_str_radix(&c.config_hash, 16).unwrap_or(0),
            rows,
            error: c.error.clone(),
        });
    }
    let summary = summarize(&records, meta.target_accuracy);
    write_summary_csv(&dir.join(SUMMARY_CSV), &summary)?;
    std::fs::write(
        dir.join(SUMMARY_TXT),
        render_table(&summary, meta.target_accuracy),
    )?;
    Ok((meta.target_accuracy, summary))
}

/// Launcher matching the config's transport, re-invoking `exe` for TCP
/// workers.
pub fn launcher_for(cfg: &ExperimentConfig, exe: PathBuf, base_args: Vec<String>) -> Launcher {
    match cfg.transport {
        TransportKind::Sim => Launcher::Sim,
        TransportKind::Tcp => Launcher::Tcp { exe, base_args },
    }
}
