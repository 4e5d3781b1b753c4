//! Per-epoch CSV records, time-to-accuracy and speedup tables.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::bandwidth_label;
use crate::collective::SyncMode;
use crate::error::{Error, Result};
use crate::trainer::{EpochMetrics, SyncStrategy};

/// One line of a per-cell CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: u32,
    pub loss: f64,
    pub test_acc: f64,
    pub bytes: u64,
    pub sim_seconds_cum: f64,
    /// Sync mode used in the epoch, or `mode:count` pairs joined by `;`
    /// when it changed mid-epoch.
    pub mode: String,
}

impl From<&EpochMetrics> for EpochRow {
    fn from(m: &EpochMetrics) -> Self {
        let mode = match m.modes.len() {
            1 => m
                .modes
                .keys()
                .next()
                .map(SyncMode::to_string)
                .unwrap_or_default(),
            _ => m
                .modes
                .iter()
                .map(|(k, v)| format!("{k}:{v}"))
                .collect::<Vec<_>>()
                .join(";"),
        };
        Self {
            epoch: m.epoch,
            loss: m.train_loss,
            test_acc: m.test_accuracy,
            bytes: m.bytes_on_wire,
            sim_seconds_cum: m.sim_seconds,
            mode,
        }
    }
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::CorruptPayload(format!("csv: {other:?}")),
    }
}

pub fn write_rows(path: &Path, rows: &[EpochRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    if rows.is_empty() {
        w.write_record([
            "epoch",
            "loss",
            "test_acc",
            "bytes",
            "sim_seconds_cum",
            "mode",
        ])
        .map_err(csv_error)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<EpochRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

/// One (bandwidth, mode, ratio) experiment cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub bandwidth_bps: f64,
    pub mode: SyncStrategy,
    pub ratio: f64,
}

impl Cell {
    pub fn file_stem(&self) -> String {
        format!(
            "{}_{}_r{}",
            bandwidth_label(self.bandwidth_bps),
            self.mode,
            self.ratio
        )
    }

    fn sort_key(&self) -> (f64, String, f64) {
        (self.bandwidth_bps, self.mode.to_string(), self.ratio)
    }
}

/// Everything recorded for one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub cell: Cell,
    pub config_hash: u64,
    pub rows: Vec<EpochRow>,
    /// Set when the cell's run failed.
    pub error: Option<String>,
}

/// Time-to-accuracy: the simulated clock at the end of the first epoch
/// whose test accuracy reaches `target`.
pub fn time_to_accuracy(rows: &[EpochRow], target: f64) -> Option<(u32, f64)> {
    rows.iter()
        .find(|r| r.test_acc >= target)
        .map(|r| (r.epoch, r.sim_seconds_cum))
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellStatus {
    Converged,
    NotConverged,
    Failed(String),
}

impl CellStatus {
    pub fn label(&self) -> String {
        match self {
            CellStatus::Converged => "ok".into(),
            CellStatus::NotConverged => "not converged".into(),
            CellStatus::Failed(reason) => format!("failed: {reason}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub cell: Cell,
    pub status: CellStatus,
    pub tta_epoch: Option<u32>,
    pub tta_seconds: Option<f64>,
    /// TTA of the Full cell at the same bandwidth divided by this cell's.
    pub speedup: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub total_bytes: u64,
}

/// Builds the summary table, ordered by (bandwidth, mode, ratio).
pub fn summarize(records: &[RunRecord], target: f64) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = records
        .iter()
        .map(|rec| {
            let tta = match rec.error {
                None => time_to_accuracy(&rec.rows, target),
                Some(_) => None,
            };
            let status = match (&rec.error, tta) {
                (Some(e), _) => CellStatus::Failed(e.clone()),
                (None, Some(_)) => CellStatus::Converged,
                (None, None) => CellStatus::NotConverged,
            };
            SummaryRow {
                cell: rec.cell,
                status,
                tta_epoch: tta.map(|t| t.0),
                tta_seconds: tta.map(|t| t.1),
                speedup: None,
                final_accuracy: rec.rows.last().map(|r| r.test_acc),
                total_bytes: rec.rows.iter().map(|r| r.bytes).sum(),
            }
        })
        .collect();
    let baselines: Vec<(f64, Option<f64>)> = rows
        .iter()
        .filter(|r| r.cell.mode == SyncStrategy::Full)
        .map(|r| (r.cell.bandwidth_bps, r.tta_seconds))
        .collect();
    for row in &mut rows {
        let base = baselines
            .iter()
            .find(|(bw, _)| *bw == row.cell.bandwidth_bps)
            .and_then(|b| b.1);
        row.speedup = match (base, row.tta_seconds) {
            (Some(b), Some(t)) if t > 0.0 => Some(b / t),
            // both reached the target before any communication
            (Some(0.0), Some(_)) => Some(1.0),
            _ => None,
        };
    }
    rows.sort_by(|a, b| {
        let (ka, kb) = (a.cell.sort_key(), b.cell.sort_key());
        ka.0.total_cmp(&kb.0)
            .then_with(|| ka.1.cmp(&kb.1))
            .then_with(|| ka.2.total_cmp(&kb.2))
    });
    rows
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

const SUMMARY_HEADER: [&str; 10] = [
    "bandwidth_bps",
    "bandwidth",
    "mode",
    "ratio",
    "status",
    "tta_epoch",
    "tta_seconds",
    "speedup",
    "final_acc",
    "total_bytes",
];

fn summary_fields(r: &SummaryRow) -> [String; 10] {
    [
        r.cell.bandwidth_bps.to_string(),
        bandwidth_label(r.cell.bandwidth_bps),
        r.cell.mode.to_string(),
        r.cell.ratio.to_string(),
        r.status.label(),
        opt(r.tta_epoch),
        opt(r.tta_seconds),
        opt(r.speedup),
        opt(r.final_accuracy),
        r.total_bytes.to_string(),
    ]
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(SUMMARY_HEADER).map_err(csv_error)?;
    for r in rows {
        w.write_record(summary_fields(r)).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Aligned plain-text rendering of the summary.
pub fn render_table(rows: &[SummaryRow], target: f64) -> String {
    let header = [
        "bandwidth",
        "mode",
        "ratio",
        "status",
        "tta_epoch",
        "tta_s",
        "speedup",
        "final_acc",
        "bytes",
    ];
    let body: Vec<[String; 9]> = rows
        .iter()
        .map(|r| {
            [
                bandwidth_label(r.cell.bandwidth_bps),
                r.cell.mode.to_string(),
                format!("{:.2}", r.cell.ratio),
                r.status.label(),
                opt(r.tta_epoch),
                r.tta_seconds.map(|t| format!("{t:.3}")).unwrap_or_default(),
                r.speedup.map(|s| format!("{s:.2}x")).unwrap_or_default(),
                r.final_accuracy
                    .map(|a| format!("{a:.4}"))
                    .unwrap_or_default(),
                r.total_bytes.to_string(),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = format!("target accuracy: {target:.4}\n");
    let line = |cells: &[String], out: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(&header.map(String::from), &mut out);
    for row in &body {
        line(row, &mut out);
    }
    out
}
