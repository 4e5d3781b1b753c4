//! Fully connected ReLU network with softmax cross-entropy, trained on one
//! flat parameter bucket.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sparsity::LossGradient;
use crate::tensor::{flatten, BucketView, FlatTensor, SparsityMask};

/// Row-major minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Vec<f32>,
    pub labels: Vec<u32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    view: BucketView,
    params: FlatTensor,
}

impl Mlp {
    pub const DEFAULT_SIZES: [usize; 3] = [64, 128, 10];

    /// He-uniform weights from `seed`, zero biases.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(sizes, |fan_in, n| {
            let bound = (6.0 / fan_in as f32).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        })
    }

    /// All parameters zero.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        Self::build(sizes, |_, n| vec![0.0; n])
    }

    fn build(sizes: &[usize], mut weights: impl FnMut(usize, usize) -> Vec<f32>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "layer sizes {sizes:?} need at least two non-zero entries"
            )));
        }
        let mut params = Vec::new();
        for (l, pair) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            params.push((
                format!("fc{}.weight", l + 1),
                weights(fan_in, fan_in * fan_out),
            ));
            params.push((format!("fc{}.bias", l + 1), vec![0.0; fan_out]));
        }
        let (flat, view) = flatten(&params)?;
        Ok(Self {
            sizes: sizes.to_vec(),
            view,
            params: flat,
        })
    }

    pub fn with_params(&self, params: FlatTensor) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(Error::shape(self.params.len(), params.len()));
        }
        Ok(Self {
            sizes: self.sizes.clone(),
            view: self.view.clone(),
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.sizes.last().expect("at least two layers")
    }

    pub fn params(&self) -> &FlatTensor {
        &self.params
    }

    pub fn view(&self) -> &BucketView {
        &self.view
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Mean softmax cross-entropy and its gradient over the flat bucket.
    pub fn forward_backward(&self, batch: &Batch) -> Result<(f32, FlatTensor)> {
        let (loss, grad) = self.loss_and_grad_at(self.params.as_slice(), batch)?;
        Ok((loss, FlatTensor::new(grad)?))
    }

    pub fn loss_and_grad_at(&self, params: &[f32], batch: &Batch) -> Result<(f32, Vec<f32>)> {
        if params.len() != self.params.len() {
            return Err(Error::shape(self.params.len(), params.len()));
        }
        let b = self.check_batch(batch)?;
        let layers = self.sizes.len() - 1;

        // acts[l] is the input to layer l, (b × sizes[l]).
        let mut acts: Vec<Vec<f32>> = Vec::with_capacity(layers + 1);
        acts.push(batch.features.clone());
        for l in 0..layers {
            let mut z = self.affine(params, l, &acts[l], b);
            if l + 1 < layers {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }

        let classes = self.classes();
        let logits = &acts[layers];
        let mut dz = vec![0.0f32; b * classes];
        let mut loss = 0.0f64;
        for i in 0..b {
            let row = &logits[i * classes..(i + 1) * classes];
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            let sum: f32 = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            let label = batch.labels[i] as usize;
            loss += f64::from(lse - row[label]);
            for c in 0..classes {
                let p = (row[c] - lse).exp();
                dz[i * classes + c] = (p - if c == label { 1.0 } else { 0.0 }) / b as f32;
            }
        }
        let loss = (loss / b as f64) as f32;
        if !loss.is_finite() {
            return Err(Error::NumericalFailure(format!("loss is {loss}")));
        }

        let mut grad = vec![0.0f32; params.len()];
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w_off, b_off) = self.layer_offsets(l);
            let input = &acts[l];
            {
                let (gw, gb) = grad[w_off..b_off + fan_out].split_at_mut(fan_in * fan_out);
                for i in 0..b {
                    let x = &input[i * fan_in..(i + 1) * fan_in];
                    for o in 0..fan_out {
                        let d = dz[i * fan_out + o];
                        if d == 0.0 {
                            continue;
                        }
                        gb[o] += d;
                        let row = &mut gw[o * fan_in..(o + 1) * fan_in];
                        for (g, &xv) in row.iter_mut().zip(x) {
                            *g += d * xv;
                        }
                    }
                }
            }
            if l > 0 {
                let w = &params[w_off..w_off + fan_in * fan_out];
                let mut dprev = vec![0.0f32; b * fan_in];
                for i in 0..b {
                    let dst = &mut dprev[i * fan_in..(i + 1) * fan_in];
                    for o in 0..fan_out {
                        let d = dz[i * fan_out + o];
                        if d == 0.0 {
                            continue;
                        }
                        for (acc, &wv) in dst.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                            *acc += d * wv;
                        }
                    }
                    // ReLU derivative: input to this layer is the previous activation
                    for (acc, &a) in dst.iter_mut().zip(&input[i * fan_in..(i + 1) * fan_in]) {
                        if a <= 0.0 {
                            *acc = 0.0;
                        }
                    }
                }
                dz = dprev;
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NumericalFailure("non-finite gradient".into()));
        }
        Ok((loss, grad))
    }

    /// Mean cross-entropy evaluated in double precision at `params`; a
    /// reference for finite-difference gradient checks.
    pub fn loss_f64(&self, params: &[f64], batch: &Batch) -> Result<f64> {
        if params.len() != self.params.len() {
            return Err(Error::shape(self.params.len(), params.len()));
        }
        let b = self.check_batch(batch)?;
        let layers = self.sizes.len() - 1;
        let mut act: Vec<f64> = batch.features.iter().map(|&v| f64::from(v)).collect();
        for l in 0..layers {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w_off, b_off) = self.layer_offsets(l);
            let mut next = vec![0.0f64; b * fan_out];
            for i in 0..b {
                let x = &act[i * fan_in..(i + 1) * fan_in];
                for o in 0..fan_out {
                    let w = &params[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                    let z = params[b_off + o] + w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
                    next[i * fan_out + o] = if l + 1 < layers { z.max(0.0) } else { z };
                }
            }
            act = next;
        }
        let classes = self.classes();
        let total: f64 = act
            .chunks_exact(classes)
            .zip(&batch.labels)
            .map(|(row, &label)| {
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - row[label as usize]
            })
            .sum();
        Ok(total / b as f64)
    }

    /// Class scores for each row.
    pub fn logits(&self, features: &[f32]) -> Result<Vec<f32>> {
        let dim = self.input_dim();
        if !features.len().is_multiple_of(dim) {
            return Err(Error::shape(dim, features.len() % dim));
        }
        let b = features.len() / dim;
        let mut act = features.to_vec();
        let layers = self.sizes.len() - 1;
        for l in 0..layers {
            act = self.affine(self.params.as_slice(), l, &act, b);
            if l + 1 < layers {
                act.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(act)
    }

    /// Fraction of rows whose arg-max class equals the label (lowest class
    /// wins ties).
    pub fn accuracy(&self, features: &[f32], labels: &[u32]) -> Result<f64> {
        if labels.is_empty() {
            return Ok(0.0);
        }
        let logits = self.logits(features)?;
        let classes = self.classes();
        if logits.len() != labels.len() * classes {
            return Err(Error::shape(labels.len() * classes, logits.len()));
        }
        let correct = logits
            .chunks_exact(classes)
            .zip(labels)
            .filter(|(row, &label)| {
                let best = row
                    .iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| {
                        if v > bv {
                            (i, v)
                        } else {
                            (bi, bv)
                        }
                    })
                    .0;
                best == label as usize
            })
            .count();
        Ok(correct as f64 / labels.len() as f64)
    }

    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let w = &self.view.entries()[2 * l];
        let b = &self.view.entries()[2 * l + 1];
        (w.offset, b.offset)
    }

    fn affine(&self, params: &[f32], l: usize, input: &[f32], b: usize) -> Vec<f32> {
        let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
        let (w_off, b_off) = self.layer_offsets(l);
        let w = &params[w_off..w_off + fan_in * fan_out];
        let bias = &params[b_off..b_off + fan_out];
        let mut out = vec![0.0f32; b * fan_out];
        for i in 0..b {
            let x = &input[i * fan_in..(i + 1) * fan_in];
            for o in 0..fan_out {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let dot: f32 = row.iter().zip(x).map(|(a, b)| a * b).sum();
                out[i * fan_out + o] = dot + bias[o];
            }
        }
        out
    }

    fn check_batch(&self, batch: &Batch) -> Result<usize> {
        let b = batch.labels.len();
        if b == 0 {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        if batch.features.len() != b * self.input_dim() {
            return Err(Error::shape(b * self.input_dim(), batch.features.len()));
        }
        if let Some(&bad) = batch.labels.iter().find(|&&y| y as usize >= self.classes()) {
            return Err(Error::InvalidConfig(format!("label {bad} out of range")));
        }
        Ok(b)
    }
}

/// `X ← X − η·g` on kept coordinates; pruned coordinates are not touched.
pub fn sgd_step(model: &Mlp, mean_grad: &FlatTensor, lr: f32, mask: &SparsityMask) -> Result<Mlp> {
    let n = model.param_count();
    if mean_grad.len() != n {
        return Err(Error::shape(n, mean_grad.len()));
    }
    if mask.len() != n {
        return Err(Error::shape(n, mask.len()));
    }
    let mut params = model.params.clone().into_vec();
    let g = mean_grad.as_slice();
    for (wi, &word) in mask.words().iter().enumerate() {
        let base = wi * 64;
        let end = (base + 64).min(n);
        for i in base..end {
            if word >> (i - base) & 1 == 1 {
                params[i] -= lr * g[i];
            }
        }
    }
    model.with_params(FlatTensor::new(params)?)
}

/// Adapter exposing the network's loss on a fixed batch to GraSP scoring.
pub struct MlpObjective<'a> {
    pub model: &'a Mlp,
    pub batch: &'a Batch,
}

impl LossGradient for MlpObjective<'_> {
    fn loss_and_grad(&self, params: &[f32]) -> Result<(f32, Vec<f32>)> {
        self.model.loss_and_grad_at(params, self.batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[(Vec<f32>, u32)]) -> Batch {
        Batch {
            features: rows.iter().flat_map(|r| r.0.clone()).collect(),
            labels: rows.iter().map(|r| r.1).collect(),
        }
    }

    #[test]
    fn layout_and_count() {
        let m = Mlp::new(&Mlp::DEFAULT_SIZES, 1).unwrap();
        assert_eq!(m.param_count(), 64 * 128 + 128 + 128 * 10 + 10);
        let names: Vec<_> = m.view().entries().iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"]);
        assert!(Mlp::new(&[4], 0).is_err());
    }

    #[test]
    fn zero_model_loss_is_ln_classes() {
        let m = Mlp::zeros(&[3, 5, 10]).unwrap();
        let rows: Vec<_> = (0..10).map(|c| (vec![1.0, -1.0, 0.5], c)).collect();
        let (loss, _) = m.forward_backward(&batch(&rows)).unwrap();
        assert!((loss - 10f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn duplicated_rows_do_not_change_grad() {
        let m = Mlp::new(&[3, 4, 2], 5).unwrap();
        let single = batch(&[(vec![0.3, -0.2, 1.0], 1), (vec![-1.0, 0.5, 0.2], 0)]);
        let doubled = batch(&[
            (vec![0.3, -0.2, 1.0], 1),
            (vec![-1.0, 0.5, 0.2], 0),
            (vec![0.3, -0.2, 1.0], 1),
            (vec![-1.0, 0.5, 0.2], 0),
        ]);
        let (l1, g1) = m.forward_backward(&single).unwrap();
        let (l2, g2) = m.forward_backward(&doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-6);
        for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn bad_batches_rejected() {
        let m = Mlp::new(&[3, 2], 0).unwrap();
        assert!(m.forward_backward(&batch(&[])).is_err());
        assert!(m.forward_backward(&batch(&[(vec![1.0, 2.0], 0)])).is_err());
        assert!(m
            .forward_backward(&batch(&[(vec![1.0, 2.0, 3.0], 5)]))
            .is_err());
    }

    #[test]
    fn sgd_step_examples() {
        let m = Mlp::new(&[1, 1], 3).unwrap();
        let m = m
            .with_params(FlatTensor::new(vec![1.0, 1.0]).unwrap())
            .unwrap();
        let g = FlatTensor::new(vec![0.5, 0.5]).unwrap();
        let full = SparsityMask::ones(2);
        assert_eq!(sgd_step(&m, &g, 0.0, &full).unwrap(), m);
        assert_eq!(
            sgd_step(&m, &g, 1.0, &full).unwrap().params().as_slice(),
            &[0.5, 0.5]
        );
        assert!(sgd_step(&m, &FlatTensor::zeros(3), 1.0, &full).is_err());
    }

    #[test]
    fn masked_weight_stays_zero() {
        let m = Mlp::new(&[1, 1], 3).unwrap();
        let mut m = m
            .with_params(FlatTensor::new(vec![0.0, 1.0]).unwrap())
            .unwrap();
        let mask = SparsityMask::from_bools(&[false, true]);
        let g = FlatTensor::new(vec![0.7, 0.1]).unwrap();
        for _ in 0..100 {
            m = sgd_step(&m, &g, 0.3, &mask).unwrap();
        }
        assert_eq!(m.params().as_slice()[0].to_bits(), 0);
    }

    #[test]
    fn accuracy_counts_argmax() {
        let m = Mlp::zeros(&[2, 3]).unwrap();
        // all-zero logits: class 0 wins ties
        assert_eq!(m.accuracy(&[1.0, 1.0, 2.0, 2.0], &[0, 1]).unwrap(), 0.5);
    }
}
