//! Experiment orchestration: config files, per-cell runs, CSV output and
//! time-to-accuracy summaries.

mod config;
mod experiment;
mod selftest;
mod summary;

pub use config::{
    bandwidth_label, parse_bandwidth, parse_config, parse_config_str, ExperimentConfig,
    TransportKind,
};
pub use experiment::{
    cell_config, cells, config_hash, format_addrs, launcher_for, parse_addrs, run_cell,
    run_experiment, summarize_dir, tcp_worker, ExperimentOutcome, Launcher, AUTO_TARGET_FRACTION,
    META_FILE, SUMMARY_CSV, SUMMARY_TXT,
};
pub use selftest::{run_selftest, CheckResult};
pub use summary::{
    read_rows, render_table, summarize, time_to_accuracy, write_rows, Cell, CellStatus, EpochRow,
    RunRecord, SummaryRow,
};
