use std::fs;
use std::path::{Path, PathBuf};

use pactrain::harness::{
    parse_config_str, read_rows, run_experiment, summarize_dir, ExperimentConfig, Launcher,
};
use pactrain::trainer::SyncStrategy;

const GOLDEN: &str = "tests/golden/tiny_packed.csv";

fn tiny(out: &Path) -> ExperimentConfig {
    let src = format!(
        r#"
[experiment]
name = "tiny"
modes = ["full", "packed"]
bandwidths = ["100Mbps"]
out = "{}"

[train]
epochs = 8
workers = 4
hidden = [32]

[data]
samples = 2000
"#,
        out.display()
    );
    parse_config_str(&src).unwrap()
}

fn read_dir_sorted(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = fs::read(&p).unwrap();
            (p.file_name().unwrap().into(), bytes)
        })
        .collect();
    files.sort();
    files
}

#[test]
fn one_csv_per_cell_and_a_summary_with_speedup() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&tiny(dir.path()), &Launcher::Sim).unwrap();
    assert_eq!(out.failed_cells(), 0);
    for name in [
        "100Mbps_full_r0.csv",
        "100Mbps_packed_r0.5.csv",
        "summary.csv",
        "run.meta",
    ] {
        assert!(dir.path().join(name).is_file(), "missing {name}");
    }
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(summary.lines().next().unwrap().contains("speedup"));
    assert_eq!(summary.lines().count(), 3);
    let rows = read_rows(&dir.path().join("100Mbps_full_r0.csv")).unwrap();
    assert_eq!(rows.len(), 8);
    assert!(rows
        .windows(2)
        .all(|w| w[1].sim_seconds_cum > w[0].sim_seconds_cum));
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = tiny(a.path());
    run_experiment(&cfg, &Launcher::Sim).unwrap();
    cfg.out = b.path().to_path_buf();
    cfg.parallel = true;
    run_experiment(&cfg, &Launcher::Sim).unwrap();
    let (fa, fb) = (read_dir_sorted(a.path()), read_dir_sorted(b.path()));
    assert_eq!(fa, fb);
}

#[test]
fn summarize_reproduces_the_written_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&tiny(dir.path()), &Launcher::Sim).unwrap();
    let written = fs::read(dir.path().join("summary.csv")).unwrap();
    fs::remove_file(dir.path().join("summary.csv")).unwrap();
    let (target, rows) = summarize_dir(dir.path()).unwrap();
    assert_eq!(target, out.target);
    assert_eq!(rows, out.summary);
    assert_eq!(fs::read(dir.path().join("summary.csv")).unwrap(), written);
}

#[test]
fn packed_epoch_costs_half_the_communication_once_stable() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&tiny(dir.path()), &Launcher::Sim).unwrap();
    let per_epoch = |mode: SyncStrategy| -> f64 {
        let rec = out.records.iter().find(|r| r.cell.mode == mode).unwrap();
        let n = rec.rows.len();
        rec.rows[n - 1].sim_seconds_cum - rec.rows[n - 2].sim_seconds_cum
    };
    let ratio = per_epoch(SyncStrategy::Packed) / per_epoch(SyncStrategy::Full);
    assert!(
        (ratio - 0.5).abs() <= 0.05,
        "packed/full epoch time {ratio}"
    );
}

#[test]
fn tiny_run_matches_frozen_csv() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&tiny(dir.path()), &Launcher::Sim).unwrap();
    let got = fs::read_to_string(dir.path().join("100Mbps_packed_r0.5.csv")).unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join(GOLDEN);
    if std::env::var_os("PACTRAIN_BLESS").is_some() {
        fs::create_dir_all(golden.parent().unwrap()).unwrap();
        fs::write(&golden, &got).unwrap();
    }
    assert_eq!(got, fs::read_to_string(&golden).unwrap());
}
