//! Pruning masks, gradient sparsity enforcement and the mask tracker.

use crate::error::{Error, Result};
use crate::tensor::{FlatTensor, SparsityMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PruneMethod {
    Magnitude,
    #[default]
    Grasp,
}

/// Which end of the GraSP score range survives pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GraspKeep {
    /// Prune the largest scores, keep the most negative ones.
    #[default]
    MostNegative,
    /// Prune the smallest scores, keep the most positive ones.
    MostPositive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneConfig {
    pub ratio: f64,
    pub method: PruneMethod,
    pub grasp_epsilon: f32,
    pub grasp_keep: GraspKeep,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            ratio: 0.5,
            method: PruneMethod::Grasp,
            grasp_epsilon: 1e-2,
            grasp_keep: GraspKeep::MostNegative,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        check_ratio(self.ratio)?;
        if !(self.grasp_epsilon > 0.0 && self.grasp_epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "grasp_epsilon must be positive, got {}",
                self.grasp_epsilon
            )));
        }
        Ok(())
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if (0.0..1.0).contains(&ratio) {
        Ok(())
    } else {
        Err(Error::InvalidRatio(ratio))
    }
}

/// Number of elements removed at `ratio`.
pub fn prune_count(len: usize, ratio: f64) -> usize {
    (ratio * len as f64).floor() as usize
}

/// Builds a mask from a pruning order: the first `k` indices of `order` are
/// dropped.
fn mask_from_order(len: usize, order: &[usize], k: usize) -> SparsityMask {
    let mut keep = vec![true; len];
    for &i in &order[..k] {
        keep[i] = false;
    }
    SparsityMask::from_bools(&keep)
}

/// Global magnitude pruning: drops the `floor(ratio * len)` smallest |w|,
/// lower index first on ties.
pub fn magnitude_prune(weights: &FlatTensor, ratio: f64) -> Result<SparsityMask> {
    check_ratio(ratio)?;
    let w = weights.as_slice();
    let k = prune_count(w.len(), ratio);
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| w[a].abs().total_cmp(&w[b].abs()).then(a.cmp(&b)));
    Ok(mask_from_order(w.len(), &order, k))
}

/// Zeroes weights outside the mask.
pub fn apply_mask(weights: &FlatTensor, mask: &SparsityMask) -> Result<FlatTensor> {
    enforce_gradient_sparsity(weights, mask)
}

/// Loss and gradient of some objective at a flat parameter vector.
pub trait LossGradient {
    fn loss_and_grad(&self, params: &[f32]) -> Result<(f32, Vec<f32>)>;
}

/// Per-parameter GraSP saliency `S = -θ ⊙ (H g)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraspScores {
    scores: FlatTensor,
}

impl GraspScores {
    pub fn new(scores: FlatTensor) -> Self {
        Self { scores }
    }

    pub fn as_slice(&self) -> &[f32] {
        self.scores.as_slice()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Computes GraSP scores with a central finite-difference Hessian-vector
/// product: `Hg ≈ (∇l(θ + εg) − ∇l(θ − εg)) / 2ε`, `ε = epsilon / max(1, ‖g‖)`.
pub fn grasp_scores<O: LossGradient + ?Sized>(
    objective: &O,
    theta: &FlatTensor,
    epsilon: f32,
) -> Result<GraspScores> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "grasp epsilon must be positive, got {epsilon}"
        )));
    }
    let theta = theta.as_slice();
    let (loss, grad) = objective.loss_and_grad(theta)?;
    check_finite("loss", std::iter::once(loss))?;
    if grad.len() != theta.len() {
        return Err(Error::shape(theta.len(), grad.len()));
    }
    check_finite("gradient", grad.iter().copied())?;

    let norm = grad
        .iter()
        .map(|&g| f64::from(g) * f64::from(g))
        .sum::<f64>()
        .sqrt();
    let step = f64::from(epsilon) / norm.max(1.0);

    let shifted = |sign: f64| -> Vec<f32> {
        theta
            .iter()
            .zip(&grad)
            .map(|(&t, &g)| (f64::from(t) + sign * step * f64::from(g)) as f32)
            .collect()
    };
    let (_, grad_plus) = objective.loss_and_grad(&shifted(1.0))?;
    let (_, grad_minus) = objective.loss_and_grad(&shifted(-1.0))?;

    let scores: Vec<f32> = theta
        .iter()
        .zip(grad_plus.iter().zip(&grad_minus))
        .map(|(&t, (&gp, &gm))| {
            let hg = (f64::from(gp) - f64::from(gm)) / (2.0 * step);
            (-f64::from(t) * hg) as f32
        })
        .collect();
    check_finite("score", scores.iter().copied())?;
    Ok(GraspScores::new(FlatTensor::new(scores)?))
}

fn check_finite(what: &str, mut values: impl Iterator<Item = f32>) -> Result<()> {
    match values.position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NumericalFailure(format!("{what} {i} is not finite"))),
        None => Ok(()),
    }
}

/// Drops `floor(ratio * len)` parameters by GraSP score, lower index first
/// on ties.
pub fn grasp_prune(scores: &GraspScores, ratio: f64, keep: GraspKeep) -> Result<SparsityMask> {
    check_ratio(ratio)?;
    let s = scores.as_slice();
    let k = prune_count(s.len(), ratio);
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| {
        let by_score = match keep {
            GraspKeep::MostNegative => s[b].total_cmp(&s[a]),
            GraspKeep::MostPositive => s[a].total_cmp(&s[b]),
        };
        by_score.then(a.cmp(&b))
    });
    Ok(mask_from_order(s.len(), &order, k))
}

/// Zeroes every gradient element outside the mask; kept elements are copied
/// bit for bit.
pub fn enforce_gradient_sparsity(grad: &FlatTensor, mask: &SparsityMask) -> Result<FlatTensor> {
    let mut out = grad.clone().into_vec();
    enforce_in_place(&mut out, mask)?;
    FlatTensor::new(out)
}

/// In-place form of [`enforce_gradient_sparsity`].
pub fn enforce_in_place(values: &mut [f32], mask: &SparsityMask) -> Result<()> {
    if values.len() != mask.len() {
        return Err(Error::shape(mask.len(), values.len()));
    }
    for (chunk, &word) in values.chunks_mut(64).zip(mask.words()) {
        if word == u64::MAX {
            continue;
        }
        for (bit, v) in chunk.iter_mut().enumerate() {
            if word >> bit & 1 == 0 {
                *v = 0.0;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskStatus {
    Stable,
    Unstable,
}

/// Declares a mask stable after `threshold` consecutive repeats of the same
/// digest (so `threshold + 1` identical observations in total).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskTracker {
    last_digest: Option<u64>,
    stable_count: u32,
    threshold: u32,
    observations: u64,
}

impl MaskTracker {
    pub const DEFAULT_THRESHOLD: u32 = 3;

    pub fn new(threshold: u32) -> Result<Self> {
        if threshold == 0 {
            return Err(Error::InvalidConfig(
                "stability threshold must be positive".into(),
            ));
        }
        Ok(Self {
            last_digest: None,
            stable_count: 0,
            threshold,
            observations: 0,
        })
    }

    pub fn observe(&mut self, mask: &SparsityMask) -> MaskStatus {
        self.observe_digest(mask.digest())
    }

    pub fn observe_digest(&mut self, digest: u64) -> MaskStatus {
        if self.last_digest == Some(digest) {
            self.stable_count = self.stable_count.saturating_add(1);
        } else {
            self.stable_count = 0;
        }
        self.last_digest = Some(digest);
        self.observations += 1;
        self.status()
    }

    pub fn status(&self) -> MaskStatus {
        if self.stable_count >= self.threshold {
            MaskStatus::Stable
        } else {
            MaskStatus::Unstable
        }
    }

    pub fn stable_count(&self) -> u32 {
        self.stable_count
    }

    pub fn threshold(&self) -> u32 {
        self.threshold
    }

    pub fn observations(&self) -> u64 {
        self.observations
    }

    pub fn last_digest(&self) -> Option<u64> {
        self.last_digest
    }
}

impl Default for MaskTracker {
    fn default() -> Self {
        Self::new(Self::DEFAULT_THRESHOLD).expect("default threshold is positive")
    }
}
