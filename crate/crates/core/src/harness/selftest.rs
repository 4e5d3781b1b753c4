//! Quick oracle checks runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{pack, ternarize, to_fp16, unpack};
use crate::collective::{ring_allreduce, run_simulated, LinkModel, WorkerTopology};
use crate::error::Result;
use crate::sparsity::{
    enforce_gradient_sparsity, grasp_prune, grasp_scores, magnitude_prune, GraspKeep, LossGradient,
    MaskStatus, MaskTracker,
};
use crate::tensor::{FlatTensor, SparsityMask};
use crate::trainer::{Batch, Mlp};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    /// `None` on success, otherwise what went wrong.
    pub failure: Option<String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

type Check = fn() -> std::result::Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn mask_digest_golden() -> std::result::Result<(), String> {
    let d = SparsityMask::zeros(64).digest();
    ensure(d == 0xa8c7_f832_281a_39c5, || format!("digest {d:#018x}"))
}

fn pack_roundtrip() -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..1000 {
        let len = [1, 7, 64, 4096][trial % 4];
        let grad = e2s(FlatTensor::new(
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        ))?;
        let mask = SparsityMask::from_fn(len, |_| rng.random_bool(0.5));
        let expected = e2s(enforce_gradient_sparsity(&grad, &mask))?;
        let back = e2s(unpack(&e2s(pack(&grad, &mask, 0))?, &mask))?;
        let same = back
            .as_slice()
            .iter()
            .zip(expected.as_slice())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("trial {trial}: round trip differs"))?;
    }
    Ok(())
}

fn ring_matches_sum() -> std::result::Result<(), String> {
    for n in [2, 4, 8] {
        let topo = e2s(WorkerTopology::uniform(n, 0, LinkModel::mbps(100.0)))?;
        let inputs: Vec<Vec<f32>> = (0..n)
            .map(|r| {
                let mut rng = ChaCha8Rng::seed_from_u64(r as u64);
                (0..4096).map(|_| rng.random_range(-1.0..1.0)).collect()
            })
            .collect();
        let results = run_simulated(&topo, |mut ep| {
            let rank = crate::collective::Transport::rank(&ep);
            ring_allreduce(&FlatTensor::new(inputs[rank].clone())?, &mut ep)
        });
        for r in results {
            let got = e2s(r)?;
            for (i, g) in got.as_slice().iter().enumerate() {
                let want: f64 = inputs.iter().map(|v| f64::from(v[i])).sum();
                let err = (f64::from(*g) - want).abs() / want.abs().max(1e-3);
                ensure(err <= 1e-5, || format!("n={n} element {i}: {g} vs {want}"))?;
            }
        }
    }
    Ok(())
}

fn ternary_unbiased() -> std::result::Result<(), String> {
    let g = [0.5f32, -0.25, 1.0];
    let grad = e2s(FlatTensor::new(g.to_vec()))?;
    let draws = 200_000u64;
    let mut sums = [0.0f64; 3];
    for seed in 0..draws {
        let t = ternarize(&grad, seed);
        for (j, s) in sums.iter_mut().enumerate() {
            *s += f64::from(t.scale()) * f64::from(t.sign(j));
        }
    }
    let scale = g.iter().fold(0.0f64, |m, v| m.max(f64::from(v.abs())));
    for j in 0..3 {
        let mean = sums[j] / draws as f64;
        let gj = f64::from(g[j]);
        // decoded value is ±scale with probability |g|/scale
        let se = (scale * gj.abs() - gj * gj).max(0.0).sqrt() / (draws as f64).sqrt();
        ensure((mean - gj).abs() <= 3.0 * se.max(1e-12), || {
            format!("element {j}: mean {mean} vs {}", g[j])
        })?;
    }
    Ok(())
}

fn fp16_table() -> std::result::Result<(), String> {
    for (x, want) in [
        (1.0 + 2f32.powi(-12), 1.0f32),
        (1.0 + 3.0 * 2f32.powi(-12), 1.000_976_6),
        (65519.0, 65504.0),
        (1e-8, 0.0),
        (0.1, 0.099_975_586),
    ] {
        let got = to_fp16(x).to_f32();
        ensure(got == want, || format!("fp16({x}) = {got}, want {want}"))?;
    }
    Ok(())
}

struct Quadratic;

impl LossGradient for Quadratic {
    fn loss_and_grad(&self, p: &[f32]) -> Result<(f32, Vec<f32>)> {
        Ok((
            p[0] * p[0] + 2.0 * p[1] * p[1],
            vec![2.0 * p[0], 4.0 * p[1]],
        ))
    }
}

fn grasp_quadratic() -> std::result::Result<(), String> {
    let theta = e2s(FlatTensor::new(vec![1.0, 1.0]))?;
    let s = e2s(grasp_scores(&Quadratic, &theta, 1e-2))?;
    let ok = (s.as_slice()[0] + 4.0).abs() < 1e-2 && (s.as_slice()[1] + 16.0).abs() < 1e-2;
    ensure(ok, || format!("scores {:?}", s.as_slice()))?;
    let mask = e2s(grasp_prune(&s, 0.5, GraspKeep::MostNegative))?;
    ensure(!mask.get(0) && mask.get(1), || {
        "kept the wrong index".into()
    })
}

fn magnitude_example() -> std::result::Result<(), String> {
    let w = e2s(FlatTensor::new(vec![0.1, -0.5, 0.3, 0.0]))?;
    let m = e2s(magnitude_prune(&w, 0.5))?;
    let kept: Vec<usize> = m.kept_indices().collect();
    ensure(kept == [1, 2], || format!("kept {kept:?}"))
}

fn tracker_walk() -> std::result::Result<(), String> {
    let mut t = e2s(MaskTracker::new(3))?;
    let m = SparsityMask::ones(8);
    let seen: Vec<MaskStatus> = (0..4).map(|_| t.observe(&m)).collect();
    let want = [
        MaskStatus::Unstable,
        MaskStatus::Unstable,
        MaskStatus::Unstable,
        MaskStatus::Stable,
    ];
    ensure(seen == want, || format!("{seen:?}"))
}

fn gradient_check() -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = e2s(Mlp::new(&[8, 16, 4], 3))?;
    let batch = Batch {
        features: (0..8 * 8).map(|_| rng.random_range(-1.0..1.0)).collect(),
        labels: (0..8).map(|_| rng.random_range(0..4)).collect(),
    };
    let (_, grad) = e2s(model.forward_backward(&batch))?;
    let base: Vec<f64> = model
        .params()
        .as_slice()
        .iter()
        .map(|&v| f64::from(v))
        .collect();
    let h = 1e-3;
    for _ in 0..50 {
        let i = rng.random_range(0..base.len());
        let (mut up, mut down) = (base.clone(), base.clone());
        up[i] += h;
        down[i] -= h;
        let fd =
            (e2s(model.loss_f64(&up, &batch))? - e2s(model.loss_f64(&down, &batch))?) / (2.0 * h);
        let g = f64::from(grad.as_slice()[i]);
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-4);
        ensure(rel <= 1e-3, || {
            format!("coordinate {i}: backprop {g} vs fd {fd}")
        })?;
    }
    Ok(())
}

const CHECKS: [(&str, Check); 9] = [
    ("mask digest golden value", mask_digest_golden),
    ("pack/unpack round trip", pack_roundtrip),
    ("ring all-reduce equals sum", ring_matches_sum),
    ("ternary quantization unbiased", ternary_unbiased),
    ("fp16 rounding table", fp16_table),
    ("grasp quadratic oracle", grasp_quadratic),
    ("magnitude pruning example", magnitude_example),
    ("mask tracker state walk", tracker_walk),
    ("backprop vs finite differences", gradient_check),
];

/// Runs every check; never panics.
pub fn run_selftest() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|&(name, check)| CheckResult {
            name,
            failure: match std::panic::catch_unwind(check) {
                Ok(Ok(())) => None,
                Ok(Err(e)) => Some(e),
                Err(_) => Some("panicked".into()),
            },
        })
        .collect()
}
