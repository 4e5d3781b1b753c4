//! Data-parallel training of a small MLP with pluggable gradient sync.

mod data;
mod mlp;
mod worker;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

pub use data::{epoch_batches, shard_rows, synthetic_dataset, DataConfig, DataShard, Dataset};
pub use mlp::{sgd_step, Batch, Mlp, MlpObjective};
pub use worker::{
    compute_mask, initial_model, iterations_per_epoch, run_simulated_training,
    run_simulated_training_with, run_worker, run_worker_observed, EpochMetrics, TrainData,
    TrainingRun, WorkerReport,
};

use crate::error::{Error, Result};
use crate::sparsity::PruneConfig;

/// How gradients are synchronised each iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SyncStrategy {
    Full,
    Fp16,
    /// Top-k sparsification keeping this fraction of elements.
    TopK(f64),
    Packed,
    PackedTernary,
}

impl SyncStrategy {
    pub const DEFAULT_TOPK_RATE: f64 = 0.1;

    /// Whether the strategy relies on a pruning mask.
    pub fn uses_mask(self) -> bool {
        matches!(self, SyncStrategy::Packed | SyncStrategy::PackedTernary)
    }
}

impl fmt::Display for SyncStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SyncStrategy::Full => f.write_str("full"),
            SyncStrategy::Fp16 => f.write_str("fp16"),
            SyncStrategy::TopK(rate) => write!(f, "topk@{rate}"),
            SyncStrategy::Packed => f.write_str("packed"),
            SyncStrategy::PackedTernary => f.write_str("packed+ternary"),
        }
    }
}

impl FromStr for SyncStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "full" => return Ok(SyncStrategy::Full),
            "fp16" => return Ok(SyncStrategy::Fp16),
            "packed" => return Ok(SyncStrategy::Packed),
            "packed+ternary" | "ternary" => return Ok(SyncStrategy::PackedTernary),
            "topk" => return Ok(SyncStrategy::TopK(Self::DEFAULT_TOPK_RATE)),
            _ => {}
        }
        if let Some(rate) = s.strip_prefix("topk@") {
            let rate: f64 = rate
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad top-k rate in `{s}`")))?;
            if !(rate > 0.0 && rate <= 1.0) {
                return Err(Error::InvalidRate(rate));
            }
            return Ok(SyncStrategy::TopK(rate));
        }
        Err(Error::InvalidConfig(format!("unknown mode `{s}`")))
    }
}

/// Injects a one-bit mask disagreement on one worker for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultInjection {
    pub epoch: u32,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f32,
    pub workers: usize,
    pub hidden: Vec<usize>,
    pub data: DataConfig,
    pub strategy: SyncStrategy,
    pub prune: PruneConfig,
    /// Epochs trained dense before the mask is computed.
    pub warmup_epochs: u32,
    pub stability_threshold: u32,
    pub seed: u64,
    /// Simulated compute time charged per iteration.
    pub compute_seconds_per_iteration: f64,
    pub fault: Option<FaultInjection>,
    /// Epochs whose iterations always use a full all-reduce.
    pub force_full_epochs: BTreeSet<u32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 0.05,
            workers: 8,
            hidden: vec![128],
            data: DataConfig::default(),
            strategy: SyncStrategy::Packed,
            prune: PruneConfig::default(),
            warmup_epochs: 2,
            stability_threshold: 3,
            seed: 0,
            compute_seconds_per_iteration: 0.0,
            fault: None,
            force_full_epochs: BTreeSet::new(),
        }
    }
}

impl TrainConfig {
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(self.data.dim);
        sizes.extend_from_slice(&self.hidden);
        sizes.push(self.data.classes);
        sizes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.hidden.contains(&0) {
            return bad("hidden layers must be non-empty".into());
        }
        if !(self.compute_seconds_per_iteration >= 0.0
            && self.compute_seconds_per_iteration.is_finite())
        {
            return bad("compute time must be non-negative".into());
        }
        if let Some(f) = self.fault {
            if f.rank >= self.workers {
                return bad(format!(
                    "fault rank {} outside {} workers",
                    f.rank, self.workers
                ));
            }
        }
        if let SyncStrategy::TopK(rate) = self.strategy {
            if !(rate > 0.0 && rate <= 1.0) {
                return Err(Error::InvalidRate(rate));
            }
        }
        self.prune.validate()
    }
}
