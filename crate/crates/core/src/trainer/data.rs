//! Seeded Gaussian-blob classification data and per-worker sharding.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::mlp::Batch;
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Row-major feature matrix with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f32>,
    pub labels: Vec<u32>,
    pub dim: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Gathers the given rows into a batch.
    pub fn batch(&self, rows: &[usize]) -> Batch {
        let mut features = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            features.extend_from_slice(self.row(r));
        }
        Batch {
            features,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    fn subset(&self, rows: std::ops::Range<usize>) -> Self {
        Self {
            features: self.features[rows.start * self.dim..rows.end * self.dim].to_vec(),
            labels: self.labels[rows].to_vec(),
            dim: self.dim,
            classes: self.classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataConfig {
    pub samples: usize,
    pub dim: usize,
    pub classes: usize,
    /// Standard deviation of the class means; samples have unit variance
    /// around their class mean.
    pub separation: f32,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            samples: 5000,
            dim: 64,
            classes: 10,
            separation: 0.45,
        }
    }
}

/// Deterministic blobs: class means ~ N(0, separation²·I), samples ~
/// N(mean, I), labels uniform. The first 80% of rows are the training set.
pub fn synthetic_dataset(seed: u64, cfg: &DataConfig) -> Result<(Dataset, Dataset)> {
    if cfg.classes < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 classes, got {}",
            cfg.classes
        )));
    }
    if cfg.dim == 0 || cfg.samples < 2 {
        return Err(Error::InvalidConfig(
            "dataset needs dim > 0 and at least 2 samples".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xda7a]));
    let means: Vec<f32> = (0..cfg.classes * cfg.dim)
        .map(|_| cfg.separation * Distribution::<f64>::sample(&StandardNormal, &mut rng) as f32)
        .collect();
    let mut features = Vec::with_capacity(cfg.samples * cfg.dim);
    let mut labels = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let c = rng.random_range(0..cfg.classes);
        let mean = &means[c * cfg.dim..(c + 1) * cfg.dim];
        features.extend(mean.iter().map(|m| {
            let z: f32 = StandardNormal.sample(&mut rng);
            m + z
        }));
        labels.push(c as u32);
    }
    let all = Dataset {
        features,
        labels,
        dim: cfg.dim,
        classes: cfg.classes,
    };
    let split = cfg.samples * 4 / 5;
    Ok((all.subset(0..split), all.subset(split..cfg.samples)))
}

/// Contiguous slice of the training rows owned by one worker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataShard {
    pub rank: usize,
    pub rows: std::ops::Range<usize>,
}

/// Splits `len` rows into `n` disjoint, exhaustive contiguous shards.
pub fn shard_rows(len: usize, n: usize) -> Vec<DataShard> {
    (0..n)
        .map(|rank| DataShard {
            rank,
            rows: rank * len / n..(rank + 1) * len / n,
        })
        .collect()
}

/// Minibatches a shard visits in one epoch: a seeded shuffle of its rows cut
/// into `iterations` batches of `batch_size`; leftover rows are skipped.
pub fn epoch_batches(
    shard: &DataShard,
    epoch: u32,
    batch_size: usize,
    iterations: usize,
    seed: u64,
) -> Vec<Vec<usize>> {
    let mut rows: Vec<usize> = shard.rows.clone().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        &[0x5ba7, shard.rank as u64, u64::from(epoch)],
    ));
    rows.shuffle(&mut rng);
    rows.chunks_exact(batch_size)
        .take(iterations)
        .map(|c| c.to_vec())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let cfg = DataConfig {
            samples: 200,
            ..DataConfig::default()
        };
        let a = synthetic_dataset(4, &cfg).unwrap();
        let b = synthetic_dataset(4, &cfg).unwrap();
        assert_eq!(a, b);
        let c = synthetic_dataset(5, &cfg).unwrap();
        assert_ne!(a.0.features, c.0.features);
        assert_eq!(a.0.len(), 160);
        assert_eq!(a.1.len(), 40);
        assert!(synthetic_dataset(1, &DataConfig { classes: 1, ..cfg }).is_err());
    }

    #[test]
    fn shards_partition_rows() {
        for (len, n) in [(4000, 8), (10, 3), (7, 7)] {
            let shards = shard_rows(len, n);
            let mut seen = vec![0; len];
            for s in &shards {
                for r in s.rows.clone() {
                    seen[r] += 1;
                }
            }
            assert!(seen.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn epoch_batches_reshuffle() {
        let shard = DataShard {
            rank: 1,
            rows: 10..110,
        };
        let e0 = epoch_batches(&shard, 0, 32, 3, 9);
        let e1 = epoch_batches(&shard, 1, 32, 3, 9);
        assert_eq!(e0.len(), 3);
        assert!(e0
            .iter()
            .all(|b| b.len() == 32 && b.iter().all(|r| shard.rows.contains(r))));
        assert_ne!(e0, e1);
        assert_eq!(e0, epoch_batches(&shard, 0, 32, 3, 9));
    }
}
