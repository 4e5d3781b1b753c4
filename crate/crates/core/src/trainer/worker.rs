//! The per-worker training loop.

use std::collections::BTreeMap;

use super::data::{epoch_batches, shard_rows, Dataset};
use super::mlp::{sgd_step, Mlp, MlpObjective};
use super::{SyncStrategy, TrainConfig};
use crate::collective::{
    fp16_allreduce, full_allreduce, masked_allreduce, run_simulated, ternary_allgather_aggregate,
    topk_allgather_aggregate, SyncMode, SyncStats, Transport, WorkerTopology,
};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::sparsity::{
    apply_mask, enforce_gradient_sparsity, grasp_prune, grasp_scores, magnitude_prune, MaskStatus,
    MaskTracker, PruneMethod,
};
use crate::tensor::{FlatTensor, SparsityMask};

const INIT_STREAM: u64 = 0x1a17;
const TERNARY_STREAM: u64 = 0x7e4a;
const GRASP_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub train_loss: f64,
    pub test_accuracy: f64,
    /// Bytes this worker sent during the epoch.
    pub bytes_on_wire: u64,
    /// Simulated clock at the end of the epoch.
    pub sim_seconds: f64,
    pub modes: BTreeMap<SyncMode, u32>,
}

#[derive(Debug, Clone)]
pub struct WorkerReport {
    pub rank: usize,
    pub metrics: Vec<EpochMetrics>,
    pub model: Mlp,
    pub mask: SparsityMask,
}

/// Train and test split shared by all workers.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Dataset,
    pub test: Dataset,
}

impl TrainData {
    pub fn generate(cfg: &TrainConfig) -> Result<Self> {
        let (train, test) = super::data::synthetic_dataset(cfg.seed, &cfg.data)?;
        Ok(Self { train, test })
    }
}

/// Iterations every worker runs per epoch: the smallest shard divided by
/// the batch size.
pub fn iterations_per_epoch(cfg: &TrainConfig, train_len: usize) -> Result<usize> {
    let smallest = shard_rows(train_len, cfg.workers)
        .iter()
        .map(|s| s.rows.len())
        .min()
        .unwrap_or(0);
    let iters = smallest / cfg.batch_size;
    if iters == 0 {
        return Err(Error::InvalidConfig(format!(
            "shards of {smallest} rows cannot fill a batch of {}",
            cfg.batch_size
        )));
    }
    Ok(iters)
}

/// Initial model shared by every worker.
pub fn initial_model(cfg: &TrainConfig) -> Result<Mlp> {
    Mlp::new(&cfg.layer_sizes(), derive_seed(cfg.seed, &[INIT_STREAM]))
}

/// Builds the pruning mask from the current model. Deterministic, so every
/// worker computes the same mask independently.
pub fn compute_mask(cfg: &TrainConfig, model: &Mlp, data: &TrainData) -> Result<SparsityMask> {
    match cfg.prune.method {
        PruneMethod::Magnitude => magnitude_prune(model.params(), cfg.prune.ratio),
        PruneMethod::Grasp => {
            let rows: Vec<usize> = (0..data.train.len().min(GRASP_BATCH)).collect();
            let batch = data.train.batch(&rows);
            let objective = MlpObjective {
                model,
                batch: &batch,
            };
            let scores = grasp_scores(&objective, model.params(), cfg.prune.grasp_epsilon)?;
            grasp_prune(&scores, cfg.prune.ratio, cfg.prune.grasp_keep)
        }
    }
}

fn mean_of_sum(sum: FlatTensor, n: usize) -> Result<FlatTensor> {
    let n = n as f32;
    FlatTensor::new(sum.into_vec().into_iter().map(|v| v / n).collect())
}

/// Runs the full training loop for one rank.
pub fn run_worker<T: Transport>(
    cfg: &TrainConfig,
    data: &TrainData,
    transport: T,
) -> Result<WorkerReport> {
    run_worker_observed(cfg, data, transport, |_, _, _| {})
}

/// [`run_worker`] with a callback at every epoch boundary.
pub fn run_worker_observed<T, F>(
    cfg: &TrainConfig,
    data: &TrainData,
    mut transport: T,
    mut on_epoch: F,
) -> Result<WorkerReport>
where
    T: Transport,
    F: FnMut(&EpochMetrics, &Mlp, &SparsityMask),
{
    cfg.validate()?;
    let rank = transport.rank();
    let n = transport.world();
    if n != cfg.workers {
        return Err(Error::InvalidConfig(format!(
            "transport has {n} workers, config expects {}",
            cfg.workers
        )));
    }
    let iters = iterations_per_epoch(cfg, data.train.len())?;
    let shard = shard_rows(data.train.len(), n).swap_remove(rank);

    let mut model = initial_model(cfg)?;
    let mut mask = SparsityMask::ones(model.param_count());
    let mut tracker = MaskTracker::new(cfg.stability_threshold)?;
    let mut metrics = Vec::with_capacity(cfg.epochs as usize);

    for epoch in 0..cfg.epochs {
        if epoch == cfg.warmup_epochs && cfg.prune.ratio > 0.0 {
            mask = compute_mask(cfg, &model, data)?;
            model = model.with_params(apply_mask(model.params(), &mask)?)?;
        }
        let faulty = cfg
            .fault
            .is_some_and(|f| f.epoch == epoch && f.rank == rank);
        let force_full = cfg.force_full_epochs.contains(&epoch);

        let mut loss_sum = 0.0f64;
        let mut bytes = 0u64;
        let mut modes = BTreeMap::new();
        for (it, rows) in epoch_batches(&shard, epoch, cfg.batch_size, iters, cfg.seed)
            .iter()
            .enumerate()
        {
            let (loss, grad) = model.forward_backward(&data.train.batch(rows))?;
            loss_sum += f64::from(loss);
            let grad = enforce_gradient_sparsity(&grad, &mask)?;
            let status = tracker.observe(&mask);
            transport.charge_compute(cfg.compute_seconds_per_iteration);

            // A faulty worker advertises a mask that differs in one bit;
            // its gradient is still masked by the real one.
            let advertised = if faulty {
                mask.with_bit(0, !mask.get(0))
            } else {
                mask.clone()
            };
            let (mean, stats) = if force_full {
                let (sum, stats) = full_allreduce(&grad, &mut transport)?;
                (mean_of_sum(sum, n)?, stats)
            } else {
                aggregate(cfg, &grad, &advertised, status, &mut transport, epoch, it)?
            };
            bytes += stats.bytes_on_wire;
            *modes.entry(stats.mode_used).or_insert(0) += 1;
            model = sgd_step(&model, &mean, cfg.lr, &mask)?;
        }

        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / iters as f64,
            test_accuracy: model.accuracy(&data.test.features, &data.test.labels)?,
            bytes_on_wire: bytes,
            sim_seconds: transport.stats().simulated_seconds,
            modes,
        };
        on_epoch(&m, &model, &mask);
        metrics.push(m);
    }

    Ok(WorkerReport {
        rank,
        metrics,
        model,
        mask,
    })
}

fn aggregate<T: Transport>(
    cfg: &TrainConfig,
    grad: &FlatTensor,
    mask: &SparsityMask,
    status: MaskStatus,
    transport: &mut T,
    epoch: u32,
    iteration: usize,
) -> Result<(FlatTensor, SyncStats)> {
    let n = transport.world();
    let (sum, stats) = match cfg.strategy {
        SyncStrategy::Full => full_allreduce(grad, transport)?,
        SyncStrategy::Fp16 => fp16_allreduce(grad, transport)?,
        SyncStrategy::TopK(rate) => topk_allgather_aggregate(grad, rate, transport, epoch)?,
        SyncStrategy::Packed => masked_allreduce(grad, mask, status, transport, epoch)?,
        SyncStrategy::PackedTernary => {
            let seed = derive_seed(
                cfg.seed,
                &[
                    TERNARY_STREAM,
                    transport.rank() as u64,
                    u64::from(epoch),
                    iteration as u64,
                    0,
                ],
            );
            // already a mean
            return ternary_allgather_aggregate(grad, mask, status, transport, epoch, seed);
        }
    };
    Ok((mean_of_sum(sum, n)?, stats))
}

/// All workers' reports from one simulated run, in rank order.
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub reports: Vec<WorkerReport>,
}

impl TrainingRun {
    pub fn leader(&self) -> &WorkerReport {
        &self.reports[0]
    }
}

fn first_error(results: Vec<Result<WorkerReport>>) -> Result<Vec<WorkerReport>> {
    // Prefer the root cause over the link errors it triggers in peers.
    if results.iter().any(|r| r.is_err()) {
        let mut errors: Vec<Error> = results.into_iter().filter_map(|r| r.err()).collect();
        let pos = errors
            .iter()
            .position(|e| !matches!(e, Error::LinkError { .. }))
            .unwrap_or(0);
        return Err(errors.swap_remove(pos));
    }
    Ok(results.into_iter().map(|r| r.expect("checked")).collect())
}

/// Trains with one thread per worker over the simulated fabric.
pub fn run_simulated_training(cfg: &TrainConfig, topology: &WorkerTopology) -> Result<TrainingRun> {
    let data = TrainData::generate(cfg)?;
    run_simulated_training_with(cfg, topology, &data)
}

pub fn run_simulated_training_with(
    cfg: &TrainConfig,
    topology: &WorkerTopology,
    data: &TrainData,
) -> Result<TrainingRun> {
    cfg.validate()?;
    if topology.world() != cfg.workers {
        return Err(Error::InvalidConfig(format!(
            "topology has {} workers, config expects {}",
            topology.world(),
            cfg.workers
        )));
    }
    let results = run_simulated(topology, |ep| run_worker(cfg, data, ep));
    Ok(TrainingRun {
        reports: first_error(results)?,
    })
}
