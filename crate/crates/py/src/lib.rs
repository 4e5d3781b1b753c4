//! Python bindings. Tensors cross the boundary as lists of floats.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use pactrain::codec::{self, PackedGradient};
use pactrain::collective::{ring_allreduce, run_simulated, LinkModel, Transport, WorkerTopology};
use pactrain::sparsity::{self, MaskStatus, PruneConfig, PruneMethod};
use pactrain::tensor::FlatTensor;
use pactrain::trainer::{run_simulated_training, DataConfig, SyncStrategy, TrainConfig};

fn py_err(e: pactrain::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn tensor(values: Vec<f32>) -> PyResult<FlatTensor> {
    FlatTensor::new(values).map_err(py_err)
}

/// Which coordinates of a flat parameter bucket survive pruning.
#[pyclass(name = "SparsityMask", module = "pactrain_py", from_py_object)]
#[derive(Clone)]
struct PyMask(pactrain::tensor::SparsityMask);

#[pymethods]
impl PyMask {
    #[new]
    fn new(keep: Vec<bool>) -> Self {
        Self(pactrain::tensor::SparsityMask::from_bools(&keep))
    }

    #[staticmethod]
    fn ones(len: usize) -> Self {
        Self(pactrain::tensor::SparsityMask::ones(len))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __getitem__(&self, i: usize) -> PyResult<bool> {
        if i >= self.0.len() {
            return Err(pyo3::exceptions::PyIndexError::new_err(i));
        }
        Ok(self.0.get(i))
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("SparsityMask(len={}, nnz={})", self.0.len(), self.0.nnz())
    }

    fn nnz(&self) -> usize {
        self.0.nnz()
    }

    fn digest(&self) -> u64 {
        self.0.digest()
    }

    fn to_list(&self) -> Vec<bool> {
        (0..self.0.len()).map(|i| self.0.get(i)).collect()
    }
}

#[pyclass(name = "MaskTracker", module = "pactrain_py")]
struct PyTracker(sparsity::MaskTracker);

#[pymethods]
impl PyTracker {
    #[new]
    #[pyo3(signature = (threshold = 3))]
    fn new(threshold: u32) -> PyResult<Self> {
        sparsity::MaskTracker::new(threshold)
            .map(Self)
            .map_err(py_err)
    }

    /// Returns True once the mask has repeated `threshold` times.
    fn observe(&mut self, mask: &PyMask) -> bool {
        self.0.observe(&mask.0) == MaskStatus::Stable
    }
}

#[pyfunction]
fn magnitude_prune(weights: Vec<f32>, ratio: f64) -> PyResult<PyMask> {
    sparsity::magnitude_prune(&tensor(weights)?, ratio)
        .map(PyMask)
        .map_err(py_err)
}

#[pyfunction]
fn enforce_gradient_sparsity(grad: Vec<f32>, mask: &PyMask) -> PyResult<Vec<f32>> {
    sparsity::enforce_gradient_sparsity(&tensor(grad)?, &mask.0)
        .map(FlatTensor::into_vec)
        .map_err(py_err)
}

/// Packs the surviving values into a wire frame.
#[pyfunction]
#[pyo3(signature = (grad, mask, epoch = 0))]
fn pack<'py>(
    py: Python<'py>,
    grad: Vec<f32>,
    mask: &PyMask,
    epoch: u32,
) -> PyResult<Bound<'py, PyBytes>> {
    let packed = codec::pack(&tensor(grad)?, &mask.0, epoch).map_err(py_err)?;
    Ok(PyBytes::new(py, &packed.to_wire()))
}

#[pyfunction]
fn unpack(frame: &[u8], mask: &PyMask) -> PyResult<Vec<f32>> {
    let packed = PackedGradient::from_wire(frame).map_err(py_err)?;
    codec::unpack(&packed, &mask.0)
        .map(FlatTensor::into_vec)
        .map_err(py_err)
}

/// Stochastic ternary quantization: returns `(scale, signs)`.
#[pyfunction]
fn ternarize(grad: Vec<f32>, seed: u64) -> PyResult<(f32, Vec<i8>)> {
    let t = codec::ternarize(&tensor(grad)?, seed);
    Ok((t.scale(), t.signs()))
}

#[pyfunction]
fn deternarize(scale: f32, signs: Vec<i8>) -> PyResult<Vec<f32>> {
    let t = codec::TernaryGradient::from_signs(scale, &signs).map_err(py_err)?;
    Ok(codec::deternarize(&t).into_vec())
}

#[pyfunction]
fn fp16_roundtrip(values: Vec<f32>) -> PyResult<Vec<f32>> {
    Ok(codec::fp16_roundtrip(&tensor(values)?).into_vec())
}

/// Returns `(indices, values)` of the largest-magnitude elements.
#[pyfunction]
fn topk(grad: Vec<f32>, rate: f64) -> PyResult<(Vec<u32>, Vec<f32>)> {
    let p = codec::topk_select(&tensor(grad)?, rate).map_err(py_err)?;
    Ok((p.indices, p.values))
}

#[pyfunction]
fn nmse(x: Vec<f32>, x_hat: Vec<f32>) -> PyResult<f32> {
    codec::nmse(&tensor(x)?, &tensor(x_hat)?).map_err(py_err)
}

/// Ring all-reduce over a simulated fabric; returns `(sums, seconds)` where
/// `sums[r]` is rank r's result.
#[pyfunction]
#[pyo3(signature = (inputs, bandwidth_bps = 1e8, latency_s = 0.0))]
fn ring_allreduce_sim(
    inputs: Vec<Vec<f32>>,
    bandwidth_bps: f64,
    latency_s: f64,
) -> PyResult<(Vec<Vec<f32>>, f64)> {
    let link = LinkModel::new(bandwidth_bps, latency_s).map_err(py_err)?;
    let topo = WorkerTopology::uniform(inputs.len(), 0, link).map_err(py_err)?;
    let tensors = inputs
        .into_iter()
        .map(tensor)
        .collect::<PyResult<Vec<_>>>()?;
    let results = run_simulated(&topo, |mut ep| {
        let out = ring_allreduce(&tensors[ep.rank()], &mut ep)?;
        Ok::<_, pactrain::Error>((out, ep.stats().simulated_seconds))
    });
    let mut sums = Vec::with_capacity(results.len());
    let mut seconds = 0.0f64;
    for r in results {
        let (out, s) = r.map_err(py_err)?;
        sums.push(out.into_vec());
        seconds = seconds.max(s);
    }
    Ok((sums, seconds))
}

/// Simulated data-parallel training; returns one dict per epoch.
#[pyfunction]
#[pyo3(signature = (
    strategy = "packed", ratio = 0.5, epochs = 10, workers = 4, hidden = vec![128],
    samples = 10_000, bandwidth_bps = 1e8, seed = 0, method = "grasp"
))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    strategy: &str,
    ratio: f64,
    epochs: u32,
    workers: usize,
    hidden: Vec<usize>,
    samples: usize,
    bandwidth_bps: f64,
    seed: u64,
    method: &str,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let strategy: SyncStrategy = strategy.parse().map_err(py_err)?;
    let method = match method {
        "grasp" => PruneMethod::Grasp,
        "magnitude" => PruneMethod::Magnitude,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown pruning method {other:?}"
            )))
        }
    };
    let cfg = TrainConfig {
        epochs,
        workers,
        hidden,
        strategy,
        seed,
        prune: PruneConfig {
            ratio,
            method,
            ..PruneConfig::default()
        },
        data: DataConfig {
            samples,
            ..DataConfig::default()
        },
        ..TrainConfig::default()
    };
    let link = LinkModel::new(bandwidth_bps, 0.0).map_err(py_err)?;
    let topo = WorkerTopology::uniform(workers, 0, link).map_err(py_err)?;
    let run = py
        .detach(|| run_simulated_training(&cfg, &topo))
        .map_err(py_err)?;
    run.leader()
        .metrics
        .iter()
        .map(|m| {
            let d = PyDict::new(py);
            d.set_item("epoch", m.epoch)?;
            d.set_item("loss", m.train_loss)?;
            d.set_item("test_acc", m.test_accuracy)?;
            d.set_item("bytes", m.bytes_on_wire)?;
            d.set_item("sim_seconds_cum", m.sim_seconds)?;
            let modes: Vec<(String, u32)> =
                m.modes.iter().map(|(k, v)| (k.to_string(), *v)).collect();
            d.set_item("modes", modes)?;
            Ok(d)
        })
        .collect()
}

/// Runs the built-in oracle checks; returns `(name, failure or None)` pairs.
#[pyfunction]
fn selftest() -> Vec<(&'static str, Option<String>)> {
    pactrain::harness::run_selftest()
        .into_iter()
        .map(|c| (c.name, c.failure))
        .collect()
}

#[pymodule]
fn pactrain_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMask>()?;
    m.add_class::<PyTracker>()?;
    m.add_function(wrap_pyfunction!(magnitude_prune, m)?)?;
    m.add_function(wrap_pyfunction!(enforce_gradient_sparsity, m)?)?;
    m.add_function(wrap_pyfunction!(pack, m)?)?;
    m.add_function(wrap_pyfunction!(unpack, m)?)?;
    m.add_function(wrap_pyfunction!(ternarize, m)?)?;
    m.add_function(wrap_pyfunction!(deternarize, m)?)?;
    m.add_function(wrap_pyfunction!(fp16_roundtrip, m)?)?;
    m.add_function(wrap_pyfunction!(topk, m)?)?;
    m.add_function(wrap_pyfunction!(nmse, m)?)?;
    m.add_function(wrap_pyfunction!(ring_allreduce_sim, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}
