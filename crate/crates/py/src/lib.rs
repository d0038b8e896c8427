//! Python bindings. Matrices cross the boundary as lists of rows.

use collab_tta::data::{load_embedding_dataset, SuiteManifest, SyntheticSuiteConfig};
use collab_tta::engine::{Method, OnlineLearner, RunConfig};
use collab_tta::losses;
use collab_tta::math::{DenseMatrix, Tape};
use collab_tta::report::{self, Experiment, GridCell, RunReport, TableRow};
use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: collab_tta::Error) -> PyErr {
    match e {
        collab_tta::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DenseMatrix> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("matrix must have at least one row"));
    }
    DenseMatrix::from_rows(&rows).map_err(to_py)
}

fn rows_of(m: &DenseMatrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

fn contrastive_mode(name: &str) -> PyResult<losses::ContrastiveMode> {
    match name {
        "separated" => Ok(losses::ContrastiveMode::Separated),
        "literal" => Ok(losses::ContrastiveMode::Literal),
        other => Err(PyValueError::new_err(format!("unknown contrastive mode `{other}`"))),
    }
}

/// Run configuration; every field is reachable through JSON.
#[pyclass(name = "RunConfig", module = "collab_tta", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (method = "aws", base_lr = None))]
    fn new(method: &str, base_lr: Option<f64>) -> PyResult<Self> {
        let mut inner = RunConfig::for_method(method.parse::<Method>().map_err(to_py)?);
        if let Some(lr) = base_lr {
            inner.optimizer.base_lr = lr;
        }
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: serde_json::from_str(text).map_err(json_err)?,
        })
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.inner).expect("config serializes")
    }

    #[getter]
    fn method(&self) -> &'static str {
        self.inner.method.method.name()
    }

    #[setter]
    fn set_method(&mut self, name: &str) -> PyResult<()> {
        self.inner.method.method = name.parse().map_err(to_py)?;
        Ok(())
    }

    #[getter]
    fn base_lr(&self) -> f64 {
        self.inner.optimizer.base_lr
    }

    #[setter]
    fn set_base_lr(&mut self, v: f64) {
        self.inner.optimizer.base_lr = v;
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.method.k
    }

    #[setter]
    fn set_k(&mut self, v: usize) {
        self.inner.method.k = v;
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.method.n
    }

    #[setter]
    fn set_n(&mut self, v: usize) {
        self.inner.method.n = v;
    }

    #[getter]
    fn lambda_kd(&self) -> f64 {
        self.inner.method.weights.lambda_kd
    }

    #[setter]
    fn set_lambda_kd(&mut self, v: f64) {
        self.inner.method.weights.lambda_kd = v;
    }

    #[getter]
    fn lambda_ml(&self) -> f64 {
        self.inner.method.weights.lambda_ml
    }

    #[setter]
    fn set_lambda_ml(&mut self, v: f64) {
        self.inner.method.weights.lambda_ml = v;
    }

    /// Applies one sweep cell (`"kn"`, `"lambda_kd"` or `"lambda_ml"`).
    fn with_cell(&self, group: &str, label: &str) -> PyResult<Self> {
        let cell = report::grid_preset("paper-all")
            .map_err(to_py)?
            .into_iter()
            .find(|c| c.group() == group && c.label() == label)
            .ok_or_else(|| PyValueError::new_err(format!("no grid cell {group}={label}")))?;
        Ok(Self {
            inner: cell.apply(&self.inner),
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(method={:?}, base_lr={})",
            self.inner.method.method.name(),
            self.inner.optimizer.base_lr
        )
    }
}

#[pyclass(name = "RunReport", module = "collab_tta", frozen)]
struct PyRunReport {
    inner: RunReport,
}

#[pymethods]
impl PyRunReport {
    #[getter]
    fn method(&self) -> &str {
        &self.inner.method
    }

    #[getter]
    fn mean_error(&self) -> f64 {
        self.inner.mean_error
    }

    #[getter]
    fn gain(&self) -> Option<f64> {
        self.inner.gain_vs_baseline
    }

    #[getter]
    fn source_accuracy(&self) -> Option<f64> {
        self.inner.source_accuracy
    }

    #[getter]
    fn per_domain_error(&self) -> Vec<(String, f64)> {
        self.inner
            .per_domain_error
            .iter()
            .map(|d| (d.domain.clone(), d.error))
            .collect()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// JSON without wall-clock fields; identical for identical inputs.
    fn deterministic_json(&self) -> String {
        self.inner.deterministic_json()
    }

    fn table_csv(&self) -> PyResult<String> {
        report::table_csv(&[TableRow::from(&self.inner)]).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("RunReport(method={:?}, mean_error={:.3})", self.inner.method, self.inner.mean_error)
    }
}

/// Source data plus a batched target stream.
#[pyclass(name = "Experiment", module = "collab_tta", frozen)]
struct PyExperiment {
    inner: Experiment,
}

#[pymethods]
impl PyExperiment {
    /// A named synthetic suite; `overrides` is a JSON object of generator fields.
    #[staticmethod]
    #[pyo3(signature = (preset = "reference", seed = 0, overrides = None))]
    fn synthetic(preset: &str, seed: u64, overrides: Option<&str>) -> PyResult<Self> {
        let mut cfg = SyntheticSuiteConfig::preset(preset, seed).map_err(to_py)?;
        if let Some(text) = overrides {
            let mut value = serde_json::to_value(&cfg).map_err(json_err)?;
            let patch: serde_json::Value = serde_json::from_str(text).map_err(json_err)?;
            let (Some(dst), Some(src)) = (value.as_object_mut(), patch.as_object()) else {
                return Err(PyValueError::new_err("overrides must be a JSON object"));
            };
            for (k, v) in src {
                dst.insert(k.clone(), v.clone());
            }
            cfg = serde_json::from_value(value).map_err(json_err)?;
        }
        Ok(Self {
            inner: Experiment::synthetic(&cfg).map_err(to_py)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, batch_size = 64, seed = 0))]
    fn from_manifest(path: &str, batch_size: usize, seed: u64) -> PyResult<Self> {
        let path = std::path::Path::new(path);
        let loaded = SuiteManifest::read(path)
            .and_then(|m| m.load(path.parent().unwrap_or(std::path::Path::new("."))))
            .map_err(to_py)?;
        let stream = collab_tta::data::assemble_stream(&loaded.domains, batch_size, seed).map_err(to_py)?;
        Ok(Self {
            inner: Experiment {
                source: loaded.source,
                stream,
            },
        })
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.stream.classes
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.stream.dim
    }

    #[getter]
    fn domain_names(&self) -> Vec<String> {
        self.inner.stream.domain_names()
    }

    /// Unlabeled batches of domain `index`, in stream order.
    fn batches(&self, index: usize) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let d = self
            .inner
            .stream
            .domains
            .get(index)
            .ok_or_else(|| PyIndexError::new_err(format!("domain {index} out of range")))?;
        Ok(d.batches.iter().map(rows_of).collect())
    }

    #[pyo3(signature = (config, seed = 0))]
    fn run(&self, py: Python<'_>, config: &PyRunConfig, seed: u64) -> PyResult<PyRunReport> {
        let cfg = config.inner.clone();
        let inner = py.detach(|| self.inner.run(&cfg, seed, None)).map_err(to_py)?;
        Ok(PyRunReport { inner })
    }

    /// `(none, method)` reports; the method report carries its gain.
    #[pyo3(signature = (config, seed = 0))]
    fn run_with_baseline(
        &self,
        py: Python<'_>,
        config: &PyRunConfig,
        seed: u64,
    ) -> PyResult<(PyRunReport, PyRunReport)> {
        let cfg = config.inner.clone();
        let (b, r) = py.detach(|| self.inner.run_with_baseline(&cfg, seed)).map_err(to_py)?;
        Ok((PyRunReport { inner: b }, PyRunReport { inner: r }))
    }

    /// Adapt on `adapt_first` domains, then evaluate frozen on `holdout`
    /// more. Returns the report as JSON.
    #[pyo3(signature = (config, seed = 0, adapt_first = 10, holdout = 5))]
    fn generalization(
        &self,
        py: Python<'_>,
        config: &PyRunConfig,
        seed: u64,
        adapt_first: usize,
        holdout: usize,
    ) -> PyResult<String> {
        let cfg = config.inner.clone();
        let r = py
            .detach(|| self.inner.generalization(&cfg, seed, adapt_first, holdout))
            .map_err(to_py)?;
        serde_json::to_string_pretty(&r).map_err(json_err)
    }

    /// Mean error for every cell of a named grid, `None` when a cell does
    /// not fit the class count.
    #[pyo3(signature = (config, grid = "paper-all", seed = 0))]
    fn sweep(
        &self,
        py: Python<'_>,
        config: &PyRunConfig,
        grid: &str,
        seed: u64,
    ) -> PyResult<Vec<(String, String, Option<f64>)>> {
        let cells: Vec<GridCell> = report::grid_preset(grid).map_err(to_py)?;
        let cfg = config.inner.clone();
        let rows = py
            .detach(|| {
                report::sweep(&cells, &cfg, self.inner.stream.classes, |c| self.inner.mean_error(c, seed))
            })
            .map_err(to_py)?;
        Ok(rows.into_iter().map(|r| (r.group, r.label, r.mean_error)).collect())
    }

    /// A fresh learner at the initial model, for driving steps by hand.
    #[pyo3(signature = (config, seed = 0))]
    fn learner(&self, config: &PyRunConfig, seed: u64) -> PyResult<PyOnlineLearner> {
        let pair = self.inner.initial_pair(&config.inner).map_err(to_py)?;
        let batch = self
            .inner
            .stream
            .domains
            .iter()
            .flat_map(|d| d.batches.iter().map(DenseMatrix::rows))
            .max()
            .unwrap_or(1);
        let inner = OnlineLearner::new(pair, &config.inner, batch, seed).map_err(to_py)?;
        Ok(PyOnlineLearner { inner, steps: 0 })
    }
}

#[pyclass(name = "OnlineLearner", module = "collab_tta")]
struct PyOnlineLearner {
    inner: OnlineLearner,
    steps: usize,
}

#[pymethods]
impl PyOnlineLearner {
    /// Predicts on `batch`, then updates. Returns
    /// `(predictions, entropy, loss)`; predictions precede the update.
    fn adapt_step(&mut self, batch: Vec<Vec<f64>>) -> PyResult<(Vec<usize>, Vec<f64>, Option<f64>)> {
        let b = matrix(batch)?;
        let out = self.inner.adapt_step(&b, 0, self.steps).map_err(to_py)?;
        self.steps += 1;
        Ok((out.predictions, out.entropy, out.loss))
    }

    /// Class probabilities of the evaluated model, no update.
    fn evaluate(&self, batch: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows_of(&self.inner.evaluate(&matrix(batch)?).map_err(to_py)?))
    }

    #[getter]
    fn learning_rate(&self) -> f64 {
        self.inner.target_learning_rate()
    }

    /// SHA-256 over every parameter of both branches.
    fn fingerprint(&self) -> String {
        self.inner.pair().fingerprint()
    }

    fn ssl_adapter_fingerprint(&self) -> String {
        self.inner.pair().ssl_adapter.fingerprint()
    }
}

/// `{+1, 0, -1}` pair table from top-k / top-n overlap of `probs` rows.
#[pyfunction]
fn pairwise_indicator(probs: Vec<Vec<f64>>, k: usize, n: usize) -> PyResult<Vec<Vec<i8>>> {
    let ind = losses::pairwise_indicator(&matrix(probs)?, k, n).map_err(to_py)?;
    let b = ind.size();
    Ok((0..b).map(|i| (0..b).map(|j| ind.get(i, j)).collect()).collect())
}

/// Contrastive loss of `features` with pairs derived from `probs`; returns
/// `(value, gradient wrt features)`.
#[pyfunction]
#[pyo3(signature = (features, probs, k = 1, n = 5, mode = "separated"))]
fn contrastive_loss(
    features: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
    k: usize,
    n: usize,
    mode: &str,
) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let ind = losses::pairwise_indicator(&matrix(probs)?, k, n).map_err(to_py)?;
    let x = matrix(features)?;
    let mut tape = Tape::new();
    let f = tape.leaf(x.clone(), true);
    let loss = losses::contrastive_loss(&mut tape, f, &ind, contrastive_mode(mode)?).map_err(to_py)?;
    let grads = tape.gradients(loss.var).map_err(to_py)?;
    let g = grads.get(f).cloned().unwrap_or_else(|| DenseMatrix::zeros(x.rows(), x.cols()));
    Ok((tape.scalar(loss.var), rows_of(&g)))
}

/// Mutual information of the batch joint of two probability tables.
#[pyfunction]
fn mutual_information(p: Vec<Vec<f64>>, q: Vec<Vec<f64>>) -> PyResult<f64> {
    let mut tape = Tape::new();
    let (p, q) = (tape.constant(matrix(p)?), tape.constant(matrix(q)?));
    let mi = losses::mutual_information(&mut tape, p, q).map_err(to_py)?;
    Ok(tape.scalar(mi.var))
}

#[pyfunction]
fn kd_loss(target: Vec<Vec<f64>>, ssl: Vec<Vec<f64>>) -> PyResult<f64> {
    let mut tape = Tape::new();
    let (t, s) = (tape.constant(matrix(target)?), tape.constant(matrix(ssl)?));
    let l = losses::kd_loss(&mut tape, t, s).map_err(to_py)?;
    Ok(tape.scalar(l.var))
}

/// `(classes, features, labels)` from an embedding file.
#[pyfunction]
fn load_embeddings(path: &str) -> PyResult<(usize, Vec<Vec<f64>>, Vec<usize>)> {
    let ds = load_embedding_dataset(path).map_err(to_py)?;
    Ok((ds.classes(), rows_of(ds.features()), ds.labels().to_vec()))
}

/// Cell labels of a named sweep grid, in order.
#[pyfunction]
fn grid_labels(name: &str) -> PyResult<Vec<String>> {
    Ok(report::grid_preset(name).map_err(to_py)?.iter().map(GridCell::label).collect())
}

#[pymodule]
#[pyo3(name = "collab_tta")]
fn collab_tta_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyRunReport>()?;
    m.add_class::<PyExperiment>()?;
    m.add_class::<PyOnlineLearner>()?;
    m.add_function(wrap_pyfunction!(pairwise_indicator, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(mutual_information, m)?)?;
    m.add_function(wrap_pyfunction!(kd_loss, m)?)?;
    m.add_function(wrap_pyfunction!(load_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(grid_labels, m)?)?;
    m.add("METHODS", Method::ALL.iter().map(|m| m.name()).collect::<Vec<_>>())?;
    Ok(())
}
