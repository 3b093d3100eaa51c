//! Python bindings for the `metacurv` library.

use metacurv::curvature::{mc_adjoint, mc_expand, mc_init, mc_transform};
use metacurv::diag::{run_suite, Suite, SuiteSize};
use metacurv::model::{init_weights, loss_grad, mse_loss};
use metacurv::tensor::{kron, mode_product, unfold};
use metacurv::{Error, LayerShape, Method, ParamVector, Variant};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

type MetricsTuple = (u64, f64, f64, f64);
type CheckTuple = (String, usize, f64, f64, bool);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::NumericFailure(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_variant(name: &str) -> PyResult<Variant> {
    match name {
        "MC1" => Ok(Variant::MC1),
        "MC2" => Ok(Variant::MC2),
        _ => Err(PyValueError::new_err(format!(
            "unknown variant {name:?}, expected MC1 or MC2"
        ))),
    }
}

/// Dense row-major tensor.
#[pyclass(name = "Tensor", module = "metacurv_py", from_py_object)]
#[derive(Clone)]
struct PyTensor(metacurv::Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        metacurv::Tensor::new(shape, data).map(Self).map_err(py_err)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    /// Mode-`n` unfolding, `n` counted from 1.
    fn unfold(&self, n: usize) -> PyResult<PyMatrix> {
        unfold(&self.0, n).map(PyMatrix).map_err(py_err)
    }

    /// Mode-`n` product with `m`, `n` counted from 1.
    fn mode_product(&self, m: &PyMatrix, n: usize) -> PyResult<PyTensor> {
        mode_product(&self.0, &m.0, n).map(Self).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

/// Dense row-major matrix.
#[pyclass(name = "Matrix", module = "metacurv_py", from_py_object)]
#[derive(Clone)]
struct PyMatrix(metacurv::Matrix);

#[pymethods]
impl PyMatrix {
    #[new]
    fn new(rows: usize, cols: usize, data: Vec<f64>) -> PyResult<Self> {
        metacurv::Matrix::new(rows, cols, data).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn identity(n: usize) -> Self {
        Self(metacurv::Matrix::identity(n))
    }

    #[getter]
    fn rows(&self) -> usize {
        self.0.rows()
    }

    #[getter]
    fn cols(&self) -> usize {
        self.0.cols()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn get(&self, r: usize, c: usize) -> PyResult<f64> {
        if r >= self.0.rows() || c >= self.0.cols() {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(self.0.get(r, c))
    }

    fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    fn matmul(&self, other: &PyMatrix) -> PyResult<Self> {
        self.0.matmul(&other.0).map(Self).map_err(py_err)
    }

    fn kron(&self, other: &PyMatrix) -> Self {
        Self(kron(&self.0, &other.0))
    }

    fn __repr__(&self) -> String {
        format!("Matrix({}x{})", self.0.rows(), self.0.cols())
    }
}

/// Three curvature factors for one parameter tensor.
#[pyclass(name = "CurvatureBlock", module = "metacurv_py", from_py_object)]
#[derive(Clone)]
struct PyCurvatureBlock(metacurv::CurvatureBlock);

#[pymethods]
impl PyCurvatureBlock {
    #[new]
    #[pyo3(signature = (mo, mi, mf, variant = "MC2"))]
    fn new(mo: &PyMatrix, mi: &PyMatrix, mf: &PyMatrix, variant: &str) -> PyResult<Self> {
        metacurv::CurvatureBlock::new(mo.0.clone(), mi.0.clone(), mf.0.clone(), parse_variant(variant)?)
            .map(Self)
            .map_err(py_err)
    }

    /// Identity factors for a `(c_out, c_in, d)` tensor.
    #[staticmethod]
    #[pyo3(signature = (c_out, c_in, d, variant = "MC2"))]
    fn identity(c_out: usize, c_in: usize, d: usize, variant: &str) -> PyResult<Self> {
        let shape = LayerShape::new(c_out, c_in, d).map_err(py_err)?;
        Ok(Self(mc_init(shape, parse_variant(variant)?)))
    }

    #[getter]
    fn mo(&self) -> PyMatrix {
        PyMatrix(self.0.mo.clone())
    }

    #[getter]
    fn mi(&self) -> PyMatrix {
        PyMatrix(self.0.mi.clone())
    }

    #[getter]
    fn mf(&self) -> PyMatrix {
        PyMatrix(self.0.mf.clone())
    }

    fn transform(&self, g: &PyTensor) -> PyResult<PyTensor> {
        mc_transform(&g.0, &self.0).map(PyTensor).map_err(py_err)
    }

    fn adjoint(&self, u: &PyTensor) -> PyResult<PyTensor> {
        mc_adjoint(&u.0, &self.0).map(PyTensor).map_err(py_err)
    }

    /// Equivalent full matrix acting on the vectorised tensor.
    fn expand(&self) -> PyResult<PyMatrix> {
        mc_expand(&self.0).map(PyMatrix).map_err(py_err)
    }
}

/// Fully connected ReLU network.
#[pyclass(name = "Mlp", module = "metacurv_py", from_py_object)]
#[derive(Clone)]
struct PyMlp(metacurv::Mlp);

#[pymethods]
impl PyMlp {
    /// Default 1-40-40-1 network with Glorot weights.
    #[staticmethod]
    #[pyo3(signature = (seed = 0))]
    fn init(seed: u64) -> Self {
        Self(init_weights(seed))
    }

    #[staticmethod]
    fn from_params(sizes: Vec<usize>, params: Vec<f64>) -> PyResult<Self> {
        metacurv::Mlp::from_vector(&sizes, &ParamVector(params))
            .map(Self)
            .map_err(py_err)
    }

    #[getter]
    fn sizes(&self) -> Vec<usize> {
        self.0.sizes()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.0.num_params()
    }

    fn params(&self) -> Vec<f64> {
        self.0.to_vector().0
    }

    fn forward(&self, xs: Vec<f64>) -> Vec<f64> {
        self.0.forward_batch(&xs)
    }

    fn loss(&self, xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
        mse_loss(&self.0, &xs, &ys).map_err(py_err)
    }

    /// Flattened loss gradient, in `params()` order.
    fn grad(&self, xs: Vec<f64>, ys: Vec<f64>) -> PyResult<Vec<f64>> {
        loss_grad(&self.0, &xs, &ys).map(|g| g.to_vector().0).map_err(py_err)
    }
}

/// Training configuration.
#[pyclass(name = "TrainConfig", module = "metacurv_py", from_py_object)]
#[derive(Clone)]
struct PyTrainConfig(metacurv::TrainConfig);

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (method, k_shot = 5, iterations = None, seed = None, meta_batch = None, eval_every = None, eval_tasks = None, deterministic = None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        method: &str,
        k_shot: usize,
        iterations: Option<u64>,
        seed: Option<u64>,
        meta_batch: Option<usize>,
        eval_every: Option<u64>,
        eval_tasks: Option<usize>,
        deterministic: Option<bool>,
    ) -> PyResult<Self> {
        let method: Method = method.parse().map_err(py_err)?;
        let mut c = metacurv::TrainConfig::new(method, k_shot);
        c.iterations = iterations.unwrap_or(c.iterations);
        c.seed = seed.unwrap_or(c.seed);
        c.meta_batch = meta_batch.unwrap_or(c.meta_batch);
        c.eval_every = eval_every.unwrap_or(c.eval_every);
        c.eval_tasks = eval_tasks.unwrap_or(c.eval_tasks);
        c.deterministic = deterministic.unwrap_or(c.deterministic);
        c.validate().map_err(py_err)?;
        Ok(Self(c))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let c: metacurv::TrainConfig = serde_json::from_str(text).map_err(|e| py_err(e.into()))?;
        c.validate().map_err(py_err)?;
        Ok(Self(c))
    }

    fn to_json(&self) -> PyResult<String> {
        metacurv::format::to_json(&self.0).map_err(py_err)
    }

    #[getter]
    fn method(&self) -> &'static str {
        self.0.method.name()
    }

    #[getter]
    fn k_shot(&self) -> usize {
        self.0.k_shot
    }

    #[getter]
    fn iterations(&self) -> u64 {
        self.0.iterations
    }
}

/// Saved training state.
#[pyclass(name = "Checkpoint", module = "metacurv_py", from_py_object)]
#[derive(Clone)]
struct PyCheckpoint(metacurv::Checkpoint);

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        metacurv::Checkpoint::load(path).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        metacurv::Checkpoint::from_json(text).map(Self).map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).map_err(py_err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(py_err)
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.0.iteration
    }

    #[getter]
    fn method(&self) -> &'static str {
        self.0.config.method.name()
    }

    #[getter]
    fn config(&self) -> PyTrainConfig {
        PyTrainConfig(self.0.config.clone())
    }

    fn network(&self) -> PyResult<PyMlp> {
        self.0.network().map(PyMlp).map_err(py_err)
    }

    /// Curvature blocks of the first rule, one per parameter tensor.
    fn curvature_blocks(&self) -> Vec<PyCurvatureBlock> {
        match self.0.rules.first() {
            Some(metacurv::InnerRule::MetaCurv { blocks, .. }) => {
                blocks.iter().cloned().map(PyCurvatureBlock).collect()
            }
            _ => Vec::new(),
        }
    }

    /// Mean test loss and 95% half-width after adaptation.
    #[pyo3(signature = (tasks = 600, shots = None, steps = 1, seed = 0))]
    fn evaluate(&self, tasks: usize, shots: Option<usize>, steps: usize, seed: u64) -> PyResult<(f64, f64)> {
        let shots = shots.unwrap_or(self.0.config.k_shot);
        let r = metacurv::evaluate(&self.0, tasks, shots, steps, seed).map_err(py_err)?;
        Ok((r.mean, r.ci95))
    }
}

/// Runs meta-training and returns `(best, last, metrics)`, where each
/// metrics row is `(iteration, train_loss, val_loss, val_ci)`.
#[pyfunction]
fn meta_train(py: Python<'_>, config: &PyTrainConfig) -> PyResult<(PyCheckpoint, PyCheckpoint, Vec<MetricsTuple>)> {
    let c = config.0.clone();
    let out = py.detach(|| metacurv::meta_train(c)).map_err(py_err)?;
    let rows = out
        .metrics
        .iter()
        .map(|r| (r.iteration, r.train_loss, r.val_loss, r.val_ci))
        .collect();
    Ok((PyCheckpoint(out.best), PyCheckpoint(out.last), rows))
}

/// Runs a diagnostic suite and returns `(name, instances, max_error,
/// tolerance, passed)` per check.
#[pyfunction]
#[pyo3(signature = (suite, seed = 0))]
fn diag(py: Python<'_>, suite: &str, seed: u64) -> PyResult<Vec<CheckTuple>> {
    let suite: Suite = suite.parse().map_err(py_err)?;
    let report = py
        .detach(|| run_suite(suite, seed, SuiteSize::default()))
        .map_err(py_err)?;
    Ok(report
        .checks
        .into_iter()
        .map(|c| (c.name, c.instances, c.max_error, c.tolerance, c.passed))
        .collect())
}

#[pymodule]
fn metacurv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyMatrix>()?;
    m.add_class::<PyCurvatureBlock>()?;
    m.add_class::<PyMlp>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(meta_train, m)?)?;
    m.add_function(wrap_pyfunction!(diag, m)?)?;
    Ok(())
}
