//! Experiment configuration files.
//!
//! Configs are TOML: `key = value` lines grouped into `[sections]`. Only
//! `[experiment] name` is required; every other key falls back to the
//! defaults of [`TrainConfig`] and [`ExperimentConfig`]. Unknown keys are
//! rejected.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use crate::collective::LinkModel;
use crate::error::{Error, Result};
use crate::sparsity::{GraspKeep, PruneMethod};
use crate::trainer::{FaultInjection, SyncStrategy, TrainConfig};

/// Which transport carries the workers' messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransportKind {
    #[default]
    Sim,
    Tcp,
}

impl FromStr for TransportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sim" => Ok(TransportKind::Sim),
            "tcp" => Ok(TransportKind::Tcp),
            _ => Err(Error::InvalidConfig(format!("unknown transport `{s}`"))),
        }
    }
}

impl fmt::Display for TransportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransportKind::Sim => "sim",
            TransportKind::Tcp => "tcp",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    /// Base training config; each cell overrides the strategy and ratio.
    pub train: TrainConfig,
    /// Bandwidth scenarios in bits per second; every link gets the same one.
    pub bandwidths: Vec<f64>,
    pub latency_s: f64,
    pub modes: Vec<SyncStrategy>,
    /// Pruning ratios tried for the mask-based modes.
    pub ratios: Vec<f64>,
    /// `None` means 90% of the dense baseline's final accuracy.
    pub target_accuracy: Option<f64>,
    pub out: PathBuf,
    pub parallel: bool,
    pub transport: TransportKind,
}

impl ExperimentConfig {
    pub const DEFAULT_BANDWIDTHS: [f64; 3] = [100e6, 500e6, 1e9];

    pub fn default_modes() -> Vec<SyncStrategy> {
        vec![
            SyncStrategy::Full,
            SyncStrategy::Fp16,
            SyncStrategy::TopK(0.1),
            SyncStrategy::TopK(0.01),
            SyncStrategy::Packed,
            SyncStrategy::PackedTernary,
        ]
    }

    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            train: TrainConfig::default(),
            bandwidths: Self::DEFAULT_BANDWIDTHS.to_vec(),
            latency_s: 0.0,
            modes: Self::default_modes(),
            ratios: vec![0.5],
            target_accuracy: None,
            out: PathBuf::from("results"),
            parallel: false,
            transport: TransportKind::Sim,
        }
    }

    pub fn link(&self, bandwidth_bps: f64) -> Result<LinkModel> {
        LinkModel::new(bandwidth_bps, self.latency_s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.name.trim().is_empty() {
            return bad("experiment name must not be empty");
        }
        if self.modes.is_empty() {
            return bad("at least one mode is required");
        }
        if self.bandwidths.is_empty() {
            return bad("at least one bandwidth is required");
        }
        if self.ratios.is_empty() {
            return bad("at least one pruning ratio is required");
        }
        for &bw in &self.bandwidths {
            self.link(bw)?;
        }
        if let Some(t) = self.target_accuracy {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "target accuracy must be in (0, 1), got {t}"
                )));
            }
        }
        for &r in &self.ratios {
            let mut train = self.train.clone();
            train.prune.ratio = r;
            train.validate()?;
        }
        for &m in &self.modes {
            let mut train = self.train.clone();
            train.strategy = m;
            train.validate()?;
        }
        self.train.validate()
    }
}

/// Parses `"100Mbps"`, `"1 Gbps"`, `"2.5e8"` and friends into bits per
/// second.
pub fn parse_bandwidth(text: &str) -> Result<f64> {
    let t = text.trim();
    let split = t
        .find(|c: char| c.is_ascii_alphabetic() && c != 'e' && c != 'E')
        .unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let scale = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "bps" => 1.0,
        "kbps" => 1e3,
        "mbps" => 1e6,
        "gbps" => 1e9,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown bandwidth unit `{other}` in `{text}`"
            )))
        }
    };
    let value: f64 = num
        .trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad bandwidth `{text}`")))?;
    let bps = value * scale;
    if !(bps > 0.0 && bps.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "bandwidth must be positive: `{text}`"
        )));
    }
    Ok(bps)
}

/// Human label for a bandwidth, e.g. `100Mbps`.
pub fn bandwidth_label(bps: f64) -> String {
    for (scale, unit) in [(1e9, "Gbps"), (1e6, "Mbps"), (1e3, "kbps")] {
        if bps >= scale {
            return format!("{}{unit}", bps / scale);
        }
    }
    format!("{bps}bps")
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Bandwidth {
    Number(f64),
    Text(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    experiment: RawExperiment,
    #[serde(default)]
    train: RawTrain,
    #[serde(default)]
    prune: RawPrune,
    #[serde(default)]
    data: RawData,
    fault: Option<RawFault>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    name: String,
    modes: Option<Vec<String>>,
    bandwidths: Option<Vec<Bandwidth>>,
    latency_ms: Option<f64>,
    target_accuracy: Option<f64>,
    out: Option<PathBuf>,
    parallel: Option<bool>,
    transport: Option<String>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    epochs: Option<u32>,
    batch_size: Option<usize>,
    lr: Option<f32>,
    workers: Option<usize>,
    hidden: Option<Vec<usize>>,
    warmup_epochs: Option<u32>,
    stability_threshold: Option<u32>,
    seed: Option<u64>,
    compute_seconds: Option<f64>,
    force_full_epochs: Option<Vec<u32>>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawPrune {
    ratios: Option<Vec<f64>>,
    method: Option<String>,
    grasp_epsilon: Option<f32>,
    grasp_keep: Option<String>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawData {
    samples: Option<usize>,
    dim: Option<usize>,
    classes: Option<usize>,
    separation: Option<f32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFault {
    epoch: u32,
    rank: usize,
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

fn map_toml_error(src: &str, err: toml::de::Error) -> Error {
    let line = err.span().map_or(0, |s| line_of(src, s.start));
    let message = err.message().trim().to_string();
    if let Some(rest) = message.strip_prefix("unknown field `") {
        if let Some(end) = rest.find('`') {
            return Error::UnknownKey {
                line,
                key: rest[..end].to_string(),
            };
        }
    }
    Error::ParseError { line, message }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Parses config text. Errors carry 1-based line numbers.
pub fn parse_config_str(src: &str) -> Result<ExperimentConfig> {
    let raw: RawConfig = toml::from_str(src).map_err(|e| map_toml_error(src, e))?;
    let e = raw.experiment;
    let mut cfg = ExperimentConfig::new(e.name);
    if let Some(modes) = e.modes {
        cfg.modes = modes.iter().map(|m| m.parse()).collect::<Result<_>>()?;
    }
    if let Some(bws) = e.bandwidths {
        cfg.bandwidths = bws
            .into_iter()
            .map(|b| match b {
                Bandwidth::Number(v) => parse_bandwidth(&v.to_string()),
                Bandwidth::Text(t) => parse_bandwidth(&t),
            })
            .collect::<Result<_>>()?;
    }
    if let Some(ms) = e.latency_ms {
        cfg.latency_s = ms / 1e3;
    }
    cfg.target_accuracy = e.target_accuracy;
    set(&mut cfg.out, e.out);
    set(&mut cfg.parallel, e.parallel);
    if let Some(t) = e.transport {
        cfg.transport = t.parse()?;
    }

    let t = raw.train;
    let train = &mut cfg.train;
    set(&mut train.epochs, t.epochs);
    set(&mut train.batch_size, t.batch_size);
    set(&mut train.lr, t.lr);
    set(&mut train.workers, t.workers);
    set(&mut train.hidden, t.hidden);
    set(&mut train.warmup_epochs, t.warmup_epochs);
    set(&mut train.stability_threshold, t.stability_threshold);
    set(&mut train.seed, t.seed);
    set(&mut train.compute_seconds_per_iteration, t.compute_seconds);
    if let Some(epochs) = t.force_full_epochs {
        train.force_full_epochs = epochs.into_iter().collect::<BTreeSet<_>>();
    }

    let p = raw.prune;
    set(&mut cfg.ratios, p.ratios);
    if let Some(m) = p.method {
        cfg.train.prune.method = match m.as_str() {
            "magnitude" => PruneMethod::Magnitude,
            "grasp" => PruneMethod::Grasp,
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "unknown pruning method `{m}`"
                )))
            }
        };
    }
    set(&mut cfg.train.prune.grasp_epsilon, p.grasp_epsilon);
    if let Some(k) = p.grasp_keep {
        cfg.train.prune.grasp_keep = match k.as_str() {
            "most_negative" => GraspKeep::MostNegative,
            "most_positive" => GraspKeep::MostPositive,
            _ => return Err(Error::InvalidConfig(format!("unknown grasp_keep `{k}`"))),
        };
    }

    let d = raw.data;
    let data = &mut cfg.train.data;
    set(&mut data.samples, d.samples);
    set(&mut data.dim, d.dim);
    set(&mut data.classes, d.classes);
    set(&mut data.separation, d.separation);

    cfg.train.fault = raw.fault.map(|f| FaultInjection {
        epoch: f.epoch,
        rank: f.rank,
    });
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let src = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    parse_config_str(&src)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = parse_config_str("[experiment]\nname = \"min\"\n").unwrap();
        let mut expected = ExperimentConfig::new("min");
        expected.train = TrainConfig::default();
        assert_eq!(cfg, expected);
        assert_eq!(cfg.bandwidths, vec![1e8, 5e8, 1e9]);
        assert_eq!(cfg.modes.len(), 6);
    }

    #[test]
    fn bandwidth_units() {
        assert_eq!(parse_bandwidth("100Mbps").unwrap(), 1e8);
        assert_eq!(parse_bandwidth("1 Gbps").unwrap(), 1e9);
        assert_eq!(parse_bandwidth("2.5e8").unwrap(), 2.5e8);
        assert_eq!(parse_bandwidth("500kbps").unwrap(), 5e5);
        assert!(parse_bandwidth("10 furlongs").is_err());
        assert!(parse_bandwidth("0Mbps").is_err());
        assert_eq!(bandwidth_label(1e8), "100Mbps");
        assert_eq!(bandwidth_label(1e9), "1Gbps");
        assert_eq!(bandwidth_label(2.5e9), "2.5Gbps");
    }

    #[test]
    fn full_config() {
        let src = r#"
[experiment]
name = "wan"
modes = ["full", "packed", "topk@0.01"]
bandwidths = ["100Mbps", 1e9]
latency_ms = 2
target_accuracy = 0.8

[train]
epochs = 5
workers = 4
hidden = [32, 16]

[prune]
ratios = [0.5, 0.8]
method = "magnitude"

[data]
samples = 400

[fault]
epoch = 3
rank = 1
"#;
        let cfg = parse_config_str(src).unwrap();
        assert_eq!(cfg.bandwidths, vec![1e8, 1e9]);
        assert_eq!(cfg.latency_s, 0.002);
        assert_eq!(cfg.modes[2], SyncStrategy::TopK(0.01));
        assert_eq!(cfg.train.hidden, vec![32, 16]);
        assert_eq!(cfg.train.layer_sizes(), vec![64, 32, 16, 10]);
        assert_eq!(cfg.ratios, vec![0.5, 0.8]);
        assert_eq!(cfg.train.prune.method, PruneMethod::Magnitude);
        assert_eq!(cfg.train.data.samples, 400);
        assert_eq!(cfg.train.fault, Some(FaultInjection { epoch: 3, rank: 1 }));
    }

    #[test]
    fn malformed_line_is_reported() {
        let err = parse_config_str("[experiment]\nname = \"x\"\nthis is not valid\n").unwrap_err();
        assert!(matches!(err, Error::ParseError { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err =
            parse_config_str("[experiment]\nname = \"x\"\n\n[train]\nepochz = 3\n").unwrap_err();
        match err {
            Error::UnknownKey { line, key } => {
                assert_eq!(line, 5);
                assert_eq!(key, "epochz");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        for src in [
            "[experiment]\nname = \"x\"\nmodes = []\n",
            "[experiment]\nname = \"x\"\ntarget_accuracy = 1.5\n",
            "[experiment]\nname = \"x\"\n[prune]\nratios = [1.0]\n",
            "[experiment]\nname = \"x\"\nmodes = [\"zip\"]\n",
            "[train]\nepochs = 3\n",
        ] {
            assert!(parse_config_str(src).is_err(), "{src}");
        }
    }

    #[test]
    fn missing_file() {
        let err = parse_config(Path::new("/definitely/not/here.toml")).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
    }
}
