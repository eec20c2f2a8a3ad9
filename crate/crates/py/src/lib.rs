//! Python bindings: datasets, configs, training, evaluation and the
//! gradient suite.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;

use dcgl_core::corpus::{gen_synthetic, DataBundle, DataPaths, SemanticEmbeddingFile, SynthConfig, SyntheticData};
use dcgl_core::evalkit::{self, GroupSpec, RankingModel, DEFAULT_KS};
use dcgl_core::gradsuite::{run_gradient_suite, SuiteConfig};
use dcgl_core::trainer::{self, RunMetrics, TrainConfig, TrainData, TrainState, CONFIG_KEYS};
use dcgl_core::Error;
use pyo3::create_exception;
use pyo3::exceptions::{PyArithmeticError, PyException, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

create_exception!(dcgl, DcglError, PyException);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) => PyValueError::new_err(e.to_string()),
        Error::NonFinite { .. } => PyArithmeticError::new_err(e.to_string()),
        Error::Io(_) | Error::MissingFile(_) => PyIOError::new_err(e.to_string()),
        _ => DcglError::new_err(e.to_string()),
    }
}

fn json_to_py(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn value_text(v: &Bound<'_, PyAny>) -> PyResult<String> {
    if let Ok(b) = v.extract::<bool>() {
        return Ok(b.to_string());
    }
    Ok(v.str()?.to_string())
}

/// Training configuration. Keyword arguments name config keys.
#[pyclass(name = "Config", module = "dcgl", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = TrainConfig::default();
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                inner.set(&k.extract::<String>()?, &value_text(&v)?).map_err(to_py)?;
            }
        }
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(PyConfig { inner: TrainConfig::parse(text).map_err(to_py)? })
    }

    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        CONFIG_KEYS.to_vec()
    }

    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        self.inner.set(key, &value_text(value)?).map_err(to_py)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner.get(key).ok_or_else(|| PyValueError::new_err(format!("unknown key {key:?}")))
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn hash_hex(&self) -> String {
        self.inner.hash_hex()
    }

    fn __eq__(&self, other: &PyConfig) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Config(hash={}, ablation={})", &self.inner.hash_hex()[..12], self.inner.ablation.tag())
    }
}

/// Filtered, split interactions plus knowledge graph and semantic vectors.
#[pyclass(name = "Dataset", module = "dcgl", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    bundle: DataBundle,
    synthetic: Option<SyntheticData>,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (
        users=200, items=300, entities=60, relations=4, popularity_exponent=1.2, latent_dim=8,
        semantic_dim=32, noise_by_frequency=false, semantic_scale=0.2, min_interactions=10,
        max_interactions=60, seed=7
    ))]
    #[allow(clippy::too_many_arguments)]
    fn synthetic(
        users: usize,
        items: usize,
        entities: usize,
        relations: usize,
        popularity_exponent: f64,
        latent_dim: usize,
        semantic_dim: usize,
        noise_by_frequency: bool,
        semantic_scale: f64,
        min_interactions: usize,
        max_interactions: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = SynthConfig {
            num_users: users,
            num_items: items,
            num_entities: entities,
            num_relations: relations,
            popularity_exponent,
            latent_dim,
            semantic_dim,
            semantic_noise_by_frequency: noise_by_frequency,
            semantic_scale,
            min_user_interactions: min_interactions,
            max_user_interactions: max_interactions,
            seed,
        };
        let data = gen_synthetic(&cfg).map_err(to_py)?;
        Ok(PyDataset { bundle: DataBundle::from_synthetic(&data), synthetic: Some(data) })
    }

    /// Reads a dataset directory (`interactions.tsv`, `kg.tsv`,
    /// `semantic.emb`, `id_map.tsv`, optional `split.txt`).
    #[staticmethod]
    #[pyo3(signature = (path, min_interactions=10, split_seed=2024, semantic=true))]
    fn load(path: PathBuf, min_interactions: usize, split_seed: u64, semantic: bool) -> PyResult<Self> {
        let bundle = DataBundle::load(&DataPaths::in_dir(&path), min_interactions, split_seed, semantic).map_err(to_py)?;
        Ok(PyDataset { bundle, synthetic: None })
    }

    /// Writes a generated dataset to a directory.
    fn write(&self, path: PathBuf) -> PyResult<()> {
        let data = self
            .synthetic
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("only generated datasets can be written"))?;
        data.write_dir(&path).map_err(to_py)
    }

    #[getter]
    fn num_users(&self) -> usize {
        self.bundle.graph.num_users
    }

    #[getter]
    fn num_items(&self) -> usize {
        self.bundle.graph.num_items
    }

    #[getter]
    fn num_interactions(&self) -> usize {
        self.bundle.graph.edges.len()
    }

    #[getter]
    fn num_entities(&self) -> usize {
        self.bundle.kg.num_entities
    }

    #[getter]
    fn num_triplets(&self) -> usize {
        self.bundle.kg.triplets.len()
    }

    /// Sizes of the train, validation and test splits.
    #[getter]
    fn split_sizes(&self) -> (usize, usize, usize) {
        let s = &self.bundle.split;
        (s.train.len(), s.valid.len(), s.test.len())
    }

    #[getter]
    fn has_semantic(&self) -> bool {
        self.bundle.semantic.is_some()
    }

    /// Training interactions per user.
    #[getter]
    fn user_counts(&self) -> Vec<usize> {
        self.bundle.features.user_counts.clone()
    }

    #[getter]
    fn item_counts(&self) -> Vec<usize> {
        self.bundle.features.item_counts.clone()
    }

    fn __repr__(&self) -> String {
        let (tr, va, te) = self.split_sizes();
        format!(
            "Dataset(users={}, items={}, interactions={}, triplets={}, split={}/{}/{})",
            self.num_users(),
            self.num_items(),
            self.num_interactions(),
            self.num_triplets(),
            tr,
            va,
            te
        )
    }
}

/// Trained parameters bound to the dataset they were trained on.
#[pyclass(name = "Model", module = "dcgl")]
struct PyModel {
    state: TrainState,
    bundle: DataBundle,
    best_epoch: usize,
    epochs_run: usize,
}

impl PyModel {
    fn snapshot(&self) -> trainer::Snapshot {
        self.state.snapshot(&TrainData::new(&self.bundle))
    }
}

#[pymethods]
impl PyModel {
    /// Untrained model with seeded initial parameters.
    #[new]
    fn new(config: &PyConfig, dataset: &PyDataset) -> PyResult<Self> {
        config.inner.validate().map_err(to_py)?;
        let state = TrainState::new(&config.inner, &dataset.bundle).map_err(to_py)?;
        Ok(PyModel { state, bundle: dataset.bundle.clone(), best_epoch: 0, epochs_run: 0 })
    }

    /// Restores a checkpoint; refuses one written under another config.
    #[staticmethod]
    fn load(path: PathBuf, config: &PyConfig, dataset: &PyDataset) -> PyResult<Self> {
        let f = File::open(&path).map_err(|_| to_py(Error::MissingFile(path.clone())))?;
        let state = TrainState::load(&config.inner, &dataset.bundle, BufReader::new(f)).map_err(to_py)?;
        let epoch = state.epoch;
        Ok(PyModel { state, bundle: dataset.bundle.clone(), best_epoch: epoch, epochs_run: epoch })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let f = File::create(&path).map_err(|e| to_py(e.into()))?;
        let mut w = BufWriter::new(f);
        self.state.save(&mut w).map_err(to_py)?;
        w.flush().map_err(|e| to_py(e.into()))
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.state.epoch
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig { inner: self.state.config().clone() }
    }

    /// Runs one training epoch and returns its mean losses.
    fn train_epoch(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let data = TrainData::new(&self.bundle);
        let l = self.state.train_epoch(&self.bundle, &data).map_err(to_py)?;
        self.epochs_run += 1;
        let d = PyDict::new(py);
        d.set_item("batches", l.batches)?;
        d.set_item("total", l.parts.total)?;
        d.set_item("bpr", l.parts.bpr)?;
        d.set_item("aug", l.parts.aug)?;
        d.set_item("align", l.parts.align)?;
        d.set_item("gate", l.parts.gate)?;
        d.set_item("reg", l.parts.reg)?;
        d.set_item("transe", l.transe)?;
        Ok(d.into_any().unbind())
    }

    /// Preference scores of one user over every item.
    fn scores(&self, user: usize) -> PyResult<Vec<f64>> {
        if user >= self.bundle.graph.num_users {
            return Err(PyValueError::new_err(format!("user {user} out of range")));
        }
        Ok(self.snapshot().score_user(user))
    }

    /// Top-`k` items for a user, skipping training items unless asked not to.
    #[pyo3(signature = (user, k=10, exclude_train=true))]
    fn recommend(&self, user: usize, k: usize, exclude_train: bool) -> PyResult<Vec<usize>> {
        let scores = self.scores(user)?;
        let empty = Vec::new();
        let exclude = if exclude_train { &self.bundle.split.train_by_user[user] } else { &empty };
        let mut ranked = evalkit::rank_items(&scores, exclude);
        ranked.truncate(k);
        Ok(ranked)
    }

    /// ID-channel gate per user and per item.
    fn gates(&self) -> (Vec<f64>, Vec<f64>) {
        let s = self.snapshot();
        (s.user_gate, s.item_gate)
    }

    /// Validation and test metrics, group tables and gate summary as a dict.
    #[pyo3(signature = (ks=None, groups=None))]
    fn evaluate(&self, py: Python<'_>, ks: Option<Vec<usize>>, groups: Option<Vec<String>>) -> PyResult<Py<PyAny>> {
        let ks = ks.unwrap_or_else(|| DEFAULT_KS.to_vec());
        if ks.is_empty() || ks.contains(&0) {
            return Err(PyValueError::new_err("ks must be positive"));
        }
        let specs = match groups {
            Some(g) => g.iter().map(|s| GroupSpec::parse(s)).collect::<dcgl_core::Result<Vec<_>>>().map_err(to_py)?,
            None => vec![GroupSpec::default_user(), GroupSpec::default_item()],
        };
        let (metrics, _) = RunMetrics::compute(&self.state, &self.bundle, &ks, &specs, self.best_epoch, self.epochs_run);
        json_to_py(py, &metrics.to_json())
    }

    fn __repr__(&self) -> String {
        format!("Model(ablation={}, epoch={})", self.state.config().ablation.tag(), self.state.epoch)
    }
}

/// Outcome of `fit`.
#[pyclass(name = "FitResult", module = "dcgl")]
struct PyFitResult {
    #[pyo3(get)]
    model: Py<PyModel>,
    #[pyo3(get)]
    best_epoch: usize,
    #[pyo3(get)]
    best_valid_recall: f64,
    #[pyo3(get)]
    stopped_early: bool,
    #[pyo3(get)]
    history: Py<PyList>,
}

/// Trains with early stopping and returns the best-validation model.
#[pyfunction]
fn fit(py: Python<'_>, config: &PyConfig, dataset: &PyDataset) -> PyResult<PyFitResult> {
    config.inner.validate().map_err(to_py)?;
    let cfg = config.inner.clone();
    let bundle = dataset.bundle.clone();
    let res = py.detach(|| trainer::fit(&cfg, &bundle)).map_err(to_py)?;
    let mut buf = Vec::new();
    res.history.write_jsonl(&mut buf).map_err(to_py)?;
    let history = PyList::empty(py);
    for line in String::from_utf8_lossy(&buf).lines() {
        history.append(json_to_py(py, line)?)?;
    }
    let model = PyModel {
        state: res.best,
        bundle,
        best_epoch: res.best_epoch,
        epochs_run: res.history.epochs.len(),
    };
    Ok(PyFitResult {
        model: Py::new(py, model)?,
        best_epoch: res.best_epoch,
        best_valid_recall: res.best_valid_recall,
        stopped_early: res.stopped_early,
        history: history.unbind(),
    })
}

/// Finite-difference check of every differentiable operation.
#[pyfunction]
#[pyo3(signature = (trials=20, seed=2024))]
fn gradcheck(py: Python<'_>, trials: usize, seed: u64) -> PyResult<Py<PyList>> {
    let cfg = SuiteConfig { trials, seed, ..SuiteConfig::default() };
    let reports = py.detach(|| run_gradient_suite(&cfg));
    let out = PyList::empty(py);
    for r in reports {
        let d = PyDict::new(py);
        d.set_item("kernel", r.kernel)?;
        d.set_item("max_rel_error", r.max_rel_error)?;
        d.set_item("trials", r.trials)?;
        d.set_item("tolerance", r.tolerance)?;
        d.set_item("pass", r.pass)?;
        out.append(d)?;
    }
    Ok(out.unbind())
}

fn sorted(relevant: Vec<usize>) -> Vec<usize> {
    let mut r = relevant;
    r.sort_unstable();
    r.dedup();
    r
}

/// Fraction of `relevant` in the first `k` of `ranked`; None if nothing is relevant.
#[pyfunction]
fn recall_at_k(ranked: Vec<usize>, relevant: Vec<usize>, k: usize) -> PyResult<Option<f64>> {
    if k == 0 {
        return Err(PyValueError::new_err("k must be at least 1"));
    }
    Ok(evalkit::recall_at_k(&ranked, &sorted(relevant), k))
}

#[pyfunction]
fn ndcg_at_k(ranked: Vec<usize>, relevant: Vec<usize>, k: usize) -> PyResult<Option<f64>> {
    if k == 0 {
        return Err(PyValueError::new_err("k must be at least 1"));
    }
    Ok(evalkit::ndcg_at_k(&ranked, &sorted(relevant), k))
}

/// Reads a semantic embedding file as `(dim, [(entity_id, vector), ...])`.
#[pyfunction]
fn read_embeddings(path: PathBuf) -> PyResult<(usize, Vec<(u32, Vec<f32>)>)> {
    let f = File::open(&path).map_err(|_| to_py(Error::MissingFile(path.clone())))?;
    let file = SemanticEmbeddingFile::read(BufReader::new(f)).map_err(to_py)?;
    Ok((file.dim, file.entries))
}

#[pyfunction]
fn write_embeddings(path: PathBuf, dim: usize, entries: Vec<(u32, Vec<f32>)>) -> PyResult<()> {
    if let Some((id, v)) = entries.iter().find(|(_, v)| v.len() != dim) {
        return Err(PyValueError::new_err(format!("entity {id} has {} values, expected {dim}", v.len())));
    }
    let f = File::create(&path).map_err(|e| to_py(e.into()))?;
    let mut w = BufWriter::new(f);
    SemanticEmbeddingFile { dim, entries }.write(&mut w).map_err(to_py)?;
    w.flush().map_err(|e| to_py(e.into()))
}

#[pymodule]
fn dcgl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DcglError", m.py().get_type::<DcglError>())?;
    m.add("DEFAULT_KS", DEFAULT_KS.to_vec())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyFitResult>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(read_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(write_embeddings, m)?)?;
    Ok(())
}
