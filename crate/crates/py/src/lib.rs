//! Python bindings: checkpoints, task-vector arithmetic, transcript metrics
//! and the toy LoRA lab.

use std::collections::BTreeMap;

use pyo3::create_exception;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use vecforge::metrics::{self, EmbeddingSet, LangMode};
use vecforge::toy::{self, SyntheticTask, TrainConfig};
use vecforge::vector::{self, read_vector, write_vector};
use vecforge::{checkpoint, tensor, Coefficient, Error};

create_exception!(vecforge_py, VecforgeError, PyValueError, "Invalid input to a vecforge operation.");

fn py_err(e: Error) -> PyErr {
    if e.is_io() {
        PyOSError::new_err(e.to_string())
    } else {
        VecforgeError::new_err(e.to_string())
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for vecforge::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn coeff(x: f64) -> PyResult<Coefficient> {
    Coefficient::new(x).py()
}

#[pyclass(name = "Tensor", module = "vecforge_py", from_py_object)]
#[derive(Clone)]
pub struct PyTensor(tensor::Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        tensor::Tensor::new(shape, data).py().map(PyTensor)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    #[getter]
    fn dtype(&self) -> &'static str {
        self.0.dtype().as_str()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?}, dtype={})", self.0.shape(), self.0.dtype().as_str())
    }

    fn __add__(&self, other: &PyTensor) -> PyResult<Self> {
        tensor::add(&self.0, &other.0).py().map(PyTensor)
    }

    fn __sub__(&self, other: &PyTensor) -> PyResult<Self> {
        tensor::sub(&self.0, &other.0).py().map(PyTensor)
    }

    fn __mul__(&self, c: f64) -> PyResult<Self> {
        tensor::scale(&self.0, c).py().map(PyTensor)
    }

    fn matmul(&self, other: &PyTensor) -> PyResult<Self> {
        tensor::matmul(&self.0, &other.0).py().map(PyTensor)
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let s = tensor::stats(&self.0);
        let d = PyDict::new(py);
        d.set_item("l2_norm", s.l2_norm)?;
        d.set_item("max_abs", s.max_abs)?;
        d.set_item("mean", s.mean)?;
        d.set_item("fraction_zero", s.fraction_zero)?;
        Ok(d)
    }
}

#[pyfunction]
fn cosine_similarity(a: &PyTensor, b: &PyTensor) -> PyResult<f64> {
    tensor::cosine_similarity(&a.0, &b.0).py()
}

#[pyclass(name = "Checkpoint", module = "vecforge_py", from_py_object)]
#[derive(Clone, Default)]
pub struct PyCheckpoint(checkpoint::Checkpoint);

#[pymethods]
impl PyCheckpoint {
    #[new]
    fn new() -> Self {
        Self::default()
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        checkpoint::read_checkpoint(path).py().map(PyCheckpoint)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::write_checkpoint(&self.0, path).py()
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        checkpoint::Checkpoint::from_bytes(data).py().map(PyCheckpoint)
    }

    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        self.0.to_bytes().py()
    }

    fn fingerprint(&self) -> String {
        checkpoint::fingerprint(&self.0)
    }

    fn names(&self) -> Vec<String> {
        self.0.names().map(str::to_string).collect()
    }

    #[getter]
    fn metadata(&self) -> BTreeMap<String, String> {
        self.0.metadata().clone()
    }

    fn set_metadata(&mut self, key: String, value: String) {
        self.0.set_metadata(key, value);
    }

    fn num_parameters(&self) -> usize {
        self.0.num_parameters()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __contains__(&self, name: &str) -> bool {
        self.0.contains(name)
    }

    fn __getitem__(&self, name: &str) -> PyResult<PyTensor> {
        self.0
            .get(name)
            .cloned()
            .map(PyTensor)
            .ok_or_else(|| pyo3::exceptions::PyKeyError::new_err(name.to_string()))
    }

    fn __setitem__(&mut self, name: String, t: PyTensor) -> PyResult<()> {
        self.0.insert(name, t.0).py().map(|_| ())
    }

    fn __repr__(&self) -> String {
        format!("Checkpoint({} tensors, {} parameters)", self.0.len(), self.0.num_parameters())
    }
}

#[pyclass(name = "TaskVector", module = "vecforge_py", from_py_object)]
#[derive(Clone)]
pub struct PyTaskVector(vector::TaskVector);

#[pymethods]
impl PyTaskVector {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        read_vector(path).py().map(PyTaskVector)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        write_vector(&self.0, path).py()
    }

    #[getter]
    fn id(&self) -> String {
        self.0.id().to_string()
    }

    #[getter]
    fn base_fingerprint(&self) -> Option<String> {
        self.0.base_fingerprint().map(str::to_string)
    }

    #[getter]
    fn source(&self) -> &'static str {
        self.0.provenance().source.as_str()
    }

    fn with_id(&self, id: String) -> Self {
        PyTaskVector(self.0.clone().with_id(id))
    }

    fn keys(&self) -> Vec<String> {
        self.0.keys().map(str::to_string).collect()
    }

    fn __getitem__(&self, key: &str) -> PyResult<PyTensor> {
        self.0
            .get(key)
            .cloned()
            .map(PyTensor)
            .ok_or_else(|| pyo3::exceptions::PyKeyError::new_err(key.to_string()))
    }

    fn l2_norm(&self) -> f64 {
        self.0.l2_norm()
    }

    fn deltas(&self) -> PyCheckpoint {
        PyCheckpoint(self.0.deltas().clone())
    }

    fn __repr__(&self) -> String {
        format!("TaskVector(id={:?}, tensors={})", self.0.id(), self.0.keys().count())
    }
}

#[pyclass(name = "LoraAdapter", module = "vecforge_py", from_py_object)]
#[derive(Clone)]
pub struct PyLoraAdapter(checkpoint::LoraAdapter);

#[pymethods]
impl PyLoraAdapter {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        checkpoint::read_lora(path).py().map(PyLoraAdapter)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::write_lora(&self.0, path).py()
    }

    #[getter]
    fn rank(&self) -> usize {
        self.0.rank()
    }

    #[getter]
    fn lora_alpha(&self) -> f64 {
        self.0.lora_alpha()
    }

    #[getter]
    fn base_fingerprint(&self) -> Option<String> {
        self.0.base_fingerprint().map(str::to_string)
    }

    fn layers(&self) -> Vec<String> {
        self.0.layers().keys().cloned().collect()
    }

    fn num_parameters(&self) -> usize {
        self.0.num_parameters()
    }

    fn fingerprint(&self) -> PyResult<String> {
        Ok(checkpoint::fingerprint(&self.0.to_checkpoint().py()?))
    }
}

#[pyfunction]
fn fingerprint(ckpt: &PyCheckpoint) -> String {
    checkpoint::fingerprint(&ckpt.0)
}

#[pyfunction]
fn extract_vector(finetuned: &PyCheckpoint, pretrained: &PyCheckpoint) -> PyResult<PyTaskVector> {
    vector::extract_vector(&finetuned.0, &pretrained.0).py().map(PyTaskVector)
}

#[pyfunction]
fn scale_vector(v: &PyTaskVector, alpha: f64) -> PyResult<PyTaskVector> {
    vector::scale_vector(&v.0, coeff(alpha)?).py().map(PyTaskVector)
}

#[pyfunction]
#[pyo3(signature = (vectors, coefficients, force = false))]
fn compose(vectors: Vec<PyTaskVector>, coefficients: Vec<f64>, force: bool) -> PyResult<PyTaskVector> {
    let refs: Vec<&vector::TaskVector> = vectors.iter().map(|v| &v.0).collect();
    let cs = coefficients.into_iter().map(coeff).collect::<PyResult<Vec<_>>>()?;
    vector::compose(&refs, &cs, force).py().map(PyTaskVector)
}

#[pyfunction]
#[pyo3(signature = (base, v, alpha = 1.0, force = false))]
fn apply(base: &PyCheckpoint, v: &PyTaskVector, alpha: f64, force: bool) -> PyResult<PyCheckpoint> {
    vector::apply(&base.0, &v.0, coeff(alpha)?, force).py().map(PyCheckpoint)
}

#[pyfunction]
fn lora_delta(adapter: &PyLoraAdapter) -> PyResult<PyTaskVector> {
    vector::lora_delta(&adapter.0).py().map(PyTaskVector)
}

fn lang(mode: &str) -> PyResult<LangMode> {
    mode.parse::<LangMode>().py()
}

#[pyfunction]
#[pyo3(signature = (text, mode = "basic_en"))]
fn normalize_text(text: &str, mode: &str) -> PyResult<String> {
    Ok(metrics::normalize_text(text, lang(mode)?))
}

/// Word error rate of whitespace-tokenized strings, after normalization.
#[pyfunction]
#[pyo3(signature = (reference, hypothesis, mode = "basic_en"))]
fn wer<'py>(py: Python<'py>, reference: &str, hypothesis: &str, mode: &str) -> PyResult<Bound<'py, PyDict>> {
    let mode = lang(mode)?;
    let r = metrics::normalize_text(reference, mode);
    let h = metrics::normalize_text(hypothesis, mode);
    let rt: Vec<&str> = r.split_whitespace().collect();
    let ht: Vec<&str> = h.split_whitespace().collect();
    let w = metrics::wer(&rt, &ht).py()?;
    let d = PyDict::new(py);
    d.set_item("wer", w.wer)?;
    d.set_item("substitutions", w.substitutions)?;
    d.set_item("insertions", w.insertions)?;
    d.set_item("deletions", w.deletions)?;
    Ok(d)
}

/// Character error rate on the raw strings (spaces count).
#[pyfunction]
fn cer(reference: &str, hypothesis: &str) -> PyResult<f64> {
    metrics::cer(reference, hypothesis).py()
}

#[pyfunction]
#[pyo3(signature = (sample, references, label = String::new()))]
fn accent_similarity(sample: Vec<f32>, references: Vec<Vec<f32>>, label: String) -> PyResult<f64> {
    let refs = references
        .into_iter()
        .map(tensor::Tensor::vector)
        .collect::<vecforge::Result<Vec<_>>>()
        .py()?;
    let set = EmbeddingSet::new(refs, label).py()?;
    metrics::accent_similarity(&tensor::Tensor::vector(sample).py()?, &set).py()
}

#[pyclass(name = "ToyModel", module = "vecforge_py", from_py_object)]
#[derive(Clone)]
pub struct PyToyModel(toy::ToyModel);

#[pymethods]
impl PyToyModel {
    /// Two 16-wide layers (tanh, identity) near the identity map.
    #[staticmethod]
    #[pyo3(signature = (seed = 0))]
    fn reference(seed: u64) -> PyResult<Self> {
        toy::ToyModel::reference(seed).py().map(PyToyModel)
    }

    #[staticmethod]
    fn from_checkpoint(ckpt: &PyCheckpoint) -> PyResult<Self> {
        toy::ToyModel::from_checkpoint(ckpt.0.clone()).py().map(PyToyModel)
    }

    fn checkpoint(&self) -> PyCheckpoint {
        PyCheckpoint(self.0.to_checkpoint())
    }

    fn with_weights(&self, weights: &PyCheckpoint) -> PyResult<Self> {
        self.0.with_weights(weights.0.clone()).py().map(PyToyModel)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.input_dim()
    }

    #[pyo3(signature = (x, adapter = None, adapter_scale = 1.0))]
    fn forward(&self, x: Vec<f64>, adapter: Option<&PyLoraAdapter>, adapter_scale: f64) -> PyResult<Vec<f64>> {
        toy::forward_f64(&self.0, &x, adapter.map(|a| &a.0), adapter_scale).py()
    }

    /// Mean squared error on the task's first `n` samples.
    #[pyo3(signature = (task, n = 1000, seed = 0, adapter = None, adapter_scale = 1.0))]
    fn evaluate(
        &self,
        task: &str,
        n: usize,
        seed: u64,
        adapter: Option<&PyLoraAdapter>,
        adapter_scale: f64,
    ) -> PyResult<f64> {
        let task = SyntheticTask::preset(task, self.0.input_dim(), seed).py()?;
        toy::evaluate_with_adapter(&self.0, adapter.map(|a| &a.0), adapter_scale, &task, n).py()
    }
}

#[pyfunction]
#[pyo3(signature = (model, task, seed = 0, steps = 2000, learning_rate = 1e-2, batch_size = 32, rank = 16, lora_alpha = 16.0))]
#[allow(clippy::too_many_arguments)]
fn train_lora(
    py: Python<'_>,
    model: &PyToyModel,
    task: &str,
    seed: u64,
    steps: usize,
    learning_rate: f64,
    batch_size: usize,
    rank: usize,
    lora_alpha: f64,
) -> PyResult<PyLoraAdapter> {
    let task = SyntheticTask::preset(task, model.0.input_dim(), seed).py()?;
    let cfg = TrainConfig {
        learning_rate,
        steps,
        batch_size,
        lora_rank: rank,
        lora_alpha,
        seed,
    };
    let m = model.0.clone();
    py.detach(move || toy::train_lora(&m, &task, &cfg)).py().map(PyLoraAdapter)
}

#[pyfunction]
#[pyo3(signature = (model, adapter, task = "rotation:30", seed = 0))]
fn gradient_check(model: &PyToyModel, adapter: &PyLoraAdapter, task: &str, seed: u64) -> PyResult<f64> {
    let task = SyntheticTask::preset(task, model.0.input_dim(), seed).py()?;
    toy::gradient_check(&model.0, &adapter.0, &task).py()
}

#[pyfunction]
#[pyo3(signature = (model, rank = 4, lora_alpha = 8.0, seed = 0, std = 0.1))]
fn random_adapter(model: &PyToyModel, rank: usize, lora_alpha: f64, seed: u64, std: f64) -> PyResult<PyLoraAdapter> {
    toy::random_adapter(&model.0, rank, lora_alpha, seed, std).py().map(PyLoraAdapter)
}

#[pymodule]
fn vecforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("VecforgeError", m.py().get_type::<VecforgeError>())?;
    m.add_class::<PyTensor>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_class::<PyTaskVector>()?;
    m.add_class::<PyLoraAdapter>()?;
    m.add_class::<PyToyModel>()?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(fingerprint, m)?)?;
    m.add_function(wrap_pyfunction!(extract_vector, m)?)?;
    m.add_function(wrap_pyfunction!(scale_vector, m)?)?;
    m.add_function(wrap_pyfunction!(compose, m)?)?;
    m.add_function(wrap_pyfunction!(apply, m)?)?;
    m.add_function(wrap_pyfunction!(lora_delta, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_text, m)?)?;
    m.add_function(wrap_pyfunction!(wer, m)?)?;
    m.add_function(wrap_pyfunction!(cer, m)?)?;
    m.add_function(wrap_pyfunction!(accent_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(train_lora, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    m.add_function(wrap_pyfunction!(random_adapter, m)?)?;
    Ok(())
}
