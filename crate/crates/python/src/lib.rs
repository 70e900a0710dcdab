//! Python bindings. Datasets, models and configs are wrapped as opaque
//! classes; numeric results come back as plain lists and dicts.

// pyo3 0.22's generated wrappers trip this lint on every `PyResult` function.
#![allow(clippy::useless_conversion)]

use std::path::PathBuf;

use psm_fusion::dgp::{self, Cohort};
use psm_fusion::experiment::{self, RepetitionSeeds};
use psm_fusion::fusion::{self, BucketSpec, FeatureSelection, FusionConfig};
use psm_fusion::metrics::{self, MapeMode};
use psm_fusion::uplift::TLearnerModel;
use psm_fusion::{Error, Source};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = String>>(s: &str) -> PyResult<T> {
    s.parse().map_err(PyValueError::new_err)
}

/// Rows of covariates with treatment, outcome, source and optional true uplift.
#[pyclass(module = "psm_fusion", name = "Dataset")]
#[derive(Clone)]
struct PyDataset {
    inner: psm_fusion::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (feature_names, rows, treatment, outcome, source = "rct", true_uplift = None))]
    fn new(
        feature_names: Vec<String>,
        rows: Vec<Vec<f64>>,
        treatment: Vec<u32>,
        outcome: Vec<u8>,
        source: &str,
        true_uplift: Option<Vec<f64>>,
    ) -> PyResult<Self> {
        let d = feature_names.len();
        if let Some(bad) = rows.iter().position(|r| r.len() != d) {
            return Err(PyValueError::new_err(format!("row {bad} has {} values, expected {d}", rows[bad].len())));
        }
        let source: Source = parse(source)?;
        let n = rows.len();
        let inner = psm_fusion::Dataset::new(
            feature_names,
            rows.concat(),
            treatment,
            outcome,
            vec![source; n],
            true_uplift,
        )
        .map_err(to_py)?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    fn read_csv(path: PathBuf) -> PyResult<Self> {
        let inner = psm_fusion::Dataset::from_csv_path(path).map_err(to_py)?;
        Ok(PyDataset { inner })
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        self.inner.to_csv_path(path).map_err(to_py)
    }

    #[getter]
    fn n_rows(&self) -> usize {
        self.inner.n_rows()
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.inner.n_features()
    }

    #[getter]
    fn feature_names(&self) -> Vec<String> {
        self.inner.feature_names().to_vec()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.inner.rows().map(<[f64]>::to_vec).collect()
    }

    fn column(&self, name: &str) -> PyResult<Vec<f64>> {
        let c = self
            .inner
            .feature_index(name)
            .ok_or_else(|| PyValueError::new_err(format!("unknown feature {name:?}")))?;
        Ok(self.inner.column(c))
    }

    #[getter]
    fn treatment(&self) -> Vec<u32> {
        self.inner.treatments().to_vec()
    }

    #[getter]
    fn outcome(&self) -> Vec<u8> {
        self.inner.outcomes().to_vec()
    }

    #[getter]
    fn source(&self) -> Vec<&'static str> {
        self.inner.sources().iter().map(|s| s.as_str()).collect()
    }

    #[getter]
    fn true_uplift(&self) -> Option<Vec<f64>> {
        self.inner.true_uplift().map(<[f64]>::to_vec)
    }

    fn subset(&self, indices: Vec<usize>) -> PyResult<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.inner.n_rows()) {
            return Err(PyValueError::new_err(format!("row index {bad} out of range")));
        }
        Ok(PyDataset {
            inner: self.inner.subset(&indices),
        })
    }

    fn __len__(&self) -> usize {
        self.inner.n_rows()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(rows={}, features={})", self.inner.n_rows(), self.inner.n_features())
    }
}

/// Generator, fusion, learner and study settings.
#[pyclass(module = "psm_fusion", name = "ExperimentConfig")]
#[derive(Clone)]
struct PyExperimentConfig {
    inner: experiment::ExperimentConfig,
}

#[pymethods]
impl PyExperimentConfig {
    #[new]
    fn new() -> Self {
        PyExperimentConfig {
            inner: experiment::ExperimentConfig::paper_default(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = experiment::ExperimentConfig::from_toml_str(text).map_err(to_py)?;
        Ok(PyExperimentConfig { inner })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    #[getter]
    fn n_rct(&self) -> usize {
        self.inner.dgp.n_rct
    }

    #[setter]
    fn set_n_rct(&mut self, v: usize) {
        self.inner.dgp.n_rct = v;
    }

    #[getter]
    fn obs_multiplier(&self) -> usize {
        self.inner.dgp.obs_multiplier
    }

    #[setter]
    fn set_obs_multiplier(&mut self, v: usize) {
        self.inner.dgp.obs_multiplier = v;
    }

    #[getter]
    fn ground_truth_multiplier(&self) -> usize {
        self.inner.dgp.ground_truth_multiplier
    }

    #[setter]
    fn set_ground_truth_multiplier(&mut self, v: usize) {
        self.inner.dgp.ground_truth_multiplier = v;
    }

    #[getter]
    fn repetitions(&self) -> usize {
        self.inner.experiment.repetitions
    }

    #[setter]
    fn set_repetitions(&mut self, v: usize) {
        self.inner.experiment.repetitions = v;
    }

    #[getter]
    fn ratios(&self) -> Vec<usize> {
        self.inner.experiment.ratios.clone()
    }

    #[setter]
    fn set_ratios(&mut self, v: Vec<usize>) {
        self.inner.experiment.ratios = v;
    }

    #[getter]
    fn master_seed(&self) -> u64 {
        self.inner.experiment.master_seed
    }

    #[setter]
    fn set_master_seed(&mut self, v: u64) {
        self.inner.experiment.master_seed = v;
    }

    #[getter]
    fn max_epochs(&self) -> usize {
        self.inner.learner.max_epochs
    }

    #[setter]
    fn set_max_epochs(&mut self, v: usize) {
        self.inner.learner.max_epochs = v;
    }

    fn __repr__(&self) -> String {
        format!(
            "ExperimentConfig(n_rct={}, repetitions={}, ratios={:?})",
            self.inner.dgp.n_rct, self.inner.experiment.repetitions, self.inner.experiment.ratios
        )
    }
}

/// Two-model (T-learner) logistic uplift model.
#[pyclass(module = "psm_fusion", name = "UpliftModel")]
struct PyUpliftModel {
    inner: TLearnerModel,
}

#[pymethods]
impl PyUpliftModel {
    #[staticmethod]
    #[pyo3(signature = (data, learning_rate = None, l2 = None, max_epochs = None, seed = 0))]
    fn fit(
        py: Python<'_>,
        data: &PyDataset,
        learning_rate: Option<f64>,
        l2: Option<f64>,
        max_epochs: Option<usize>,
        seed: u64,
    ) -> PyResult<Self> {
        let mut hyper = experiment::ExperimentConfig::paper_default().learner;
        hyper.learning_rate = learning_rate.unwrap_or(hyper.learning_rate);
        hyper.l2 = l2.unwrap_or(hyper.l2);
        hyper.max_epochs = max_epochs.unwrap_or(hyper.max_epochs);
        hyper.seed = seed;
        let (inner, _) = py.allow_threads(|| TLearnerModel::fit(&data.inner, &hyper)).map_err(to_py)?;
        Ok(PyUpliftModel { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyUpliftModel {
            inner: TLearnerModel::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(PyUpliftModel {
            inner: TLearnerModel::from_text(text, "<string>").map_err(to_py)?,
        })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    /// `P(Y=1 | x, t)` for each row.
    fn predict_outcome(&self, treatment: u32, rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        rows.iter()
            .map(|x| self.inner.predict_outcome(treatment, x).map_err(to_py))
            .collect()
    }

    /// Uplift of `treatment` over control for each row.
    fn predict_uplift(&self, treatment: u32, rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        rows.iter()
            .map(|x| self.inner.predict_uplift(treatment, x).map_err(to_py))
            .collect()
    }
}

fn dgp_config(config: Option<&PyExperimentConfig>) -> experiment::ExperimentConfig {
    config.map_or_else(experiment::ExperimentConfig::paper_default, |c| c.inner.clone())
}

/// Synthetic biased RCT, observational and ground-truth datasets.
///
/// With `repetition`, seeds follow the experiment runner and the biased RCT
/// is also split into `train` and `test`.
#[pyfunction]
#[pyo3(signature = (config = None, seed = None, repetition = None))]
fn generate<'py>(
    py: Python<'py>,
    config: Option<&PyExperimentConfig>,
    seed: Option<u64>,
    repetition: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = dgp_config(config);
    let seeds = repetition.map(|r| RepetitionSeeds::new(cfg.experiment.master_seed, r));
    let mut dcfg = match &seeds {
        Some(s) => cfg.dgp_for(s),
        None => cfg.dgp.clone(),
    };
    if let Some(s) = seed {
        dcfg.seed = s;
    }
    let gen = py.allow_threads(|| dgp::generate(&dcfg)).map_err(to_py)?;
    let out = PyDict::new_bound(py);
    if let Some(s) = &seeds {
        let (train, test) =
            experiment::train_test_split(&gen.biased_rct.data, cfg.experiment.train_fraction, s.split).map_err(to_py)?;
        out.set_item("train", Py::new(py, PyDataset { inner: train })?)?;
        out.set_item("test", Py::new(py, PyDataset { inner: test })?)?;
    }
    out.set_item("rct", Py::new(py, PyDataset { inner: gen.biased_rct.data })?)?;
    out.set_item("obs", Py::new(py, PyDataset { inner: gen.observational.data })?)?;
    out.set_item("gt", Py::new(py, PyDataset { inner: gen.ground_truth.data })?)?;
    Ok(out)
}

/// Category counts of a freshly generated biased RCT cohort:
/// persuadables, sure things, lost causes, sleeping dogs.
#[pyfunction]
#[pyo3(signature = (config = None, n = 1000))]
fn rct_category_counts(config: Option<&PyExperimentConfig>, n: usize) -> PyResult<[usize; 4]> {
    let cfg = dgp_config(config);
    let cohort = dgp::generate_cohort(&cfg.dgp, Cohort::BiasedRct, n).map_err(to_py)?;
    Ok(cohort.category_counts())
}

/// Pseudo-sample matching fusion. Returns the fused dataset and a summary dict.
#[pyfunction]
#[pyo3(signature = (
    rct, obs, ratio = 3, features = None, buckets = "", weights = None,
    backend = "kdtree", metric = "euclidean", replacement = "without", max_distance = None
))]
#[allow(clippy::too_many_arguments)]
fn fuse<'py>(
    py: Python<'py>,
    rct: &PyDataset,
    obs: &PyDataset,
    ratio: usize,
    features: Option<Vec<String>>,
    buckets: &str,
    weights: Option<Vec<f64>>,
    backend: &str,
    metric: &str,
    replacement: &str,
    max_distance: Option<f64>,
) -> PyResult<(PyDataset, Bound<'py, PyDict>)> {
    let rct = &rct.inner;
    let mut selection = match &features {
        Some(names) => FeatureSelection::from_names(rct, names).map_err(to_py)?,
        None => FeatureSelection::new((0..rct.n_features()).collect()),
    };
    if let Some(w) = weights {
        selection = FeatureSelection::with_weights(selection.columns, w).map_err(to_py)?;
    }
    let config = FusionConfig {
        selection,
        buckets: BucketSpec::parse(buckets, rct.feature_names()).map_err(to_py)?,
        ratio,
        backend: parse(backend)?,
        metric: parse(metric)?,
        replacement: parse(replacement)?,
        max_distance,
        ..FusionConfig::default()
    };
    let out = py.allow_threads(|| fusion::fuse(rct, &obs.inner, &config)).map_err(to_py)?;
    let summary = PyDict::new_bound(py);
    summary.set_item("matched", out.fused.n_matched())?;
    summary.set_item("shortfall", out.report.total_shortfall())?;
    summary.set_item("v_avg", out.plan.v_avg.clone())?;
    summary.set_item("group_means", out.plan.group_means.clone())?;
    summary.set_item("deltas", out.plan.deltas.clone())?;
    summary.set_item("target_means", out.plan.target_means.clone())?;
    summary.set_item(
        "matched_obs_rows",
        out.fused.provenance.iter().map(|m| m.obs_row).collect::<Vec<_>>(),
    )?;
    Ok((PyDataset { inner: out.fused.data }, summary))
}

/// The random-added control arm: `ratio` observational rows per RCT row,
/// drawn uniformly without replacement.
#[pyfunction]
#[pyo3(signature = (rct, obs, ratio = 3, seed = 0))]
fn random_fuse(rct: &PyDataset, obs: &PyDataset, ratio: usize, seed: u64) -> PyResult<PyDataset> {
    let fused = fusion::random_fuse(&rct.inner, &obs.inner, ratio, seed).map_err(to_py)?;
    Ok(PyDataset { inner: fused.data })
}

/// Mean standardized mean difference between treatment groups over `features`.
#[pyfunction]
fn mean_smd(data: &PyDataset, features: Vec<String>) -> PyResult<f64> {
    let sel = FeatureSelection::from_names(&data.inner, &features).map_err(to_py)?;
    Ok(fusion::smd_report(&data.inner, &sel.columns).map_err(to_py)?.mean())
}

/// Qini coefficient of an uplift ranking.
#[pyfunction]
#[pyo3(signature = (scores, treated, outcome, grid = 100))]
fn qini_coefficient(scores: Vec<f64>, treated: Vec<bool>, outcome: Vec<u8>, grid: usize) -> PyResult<f64> {
    let curve = metrics::qini_curve(&scores, &treated, &outcome, grid).map_err(to_py)?;
    Ok(metrics::qini_coefficient(&curve))
}

/// Per-treatment and weighted Qini / MAPE / COPC of `model` on `data`.
#[pyfunction]
#[pyo3(signature = (model, data, grid = 100, per_sample_mape = false))]
fn evaluate<'py>(
    py: Python<'py>,
    model: &PyUpliftModel,
    data: &PyDataset,
    grid: usize,
    per_sample_mape: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let mode = if per_sample_mape { MapeMode::PerSample } else { MapeMode::Group };
    let e = metrics::evaluate(&model.inner, &data.inner, grid, mode).map_err(to_py)?;
    let r = e.report;
    let out = PyDict::new_bound(py);
    out.set_item("w_qini", r.w_qini)?;
    out.set_item("w_mape", r.w_mape)?;
    out.set_item("w_copc", r.w_copc)?;
    out.set_item("coverage", r.coverage)?;
    out.set_item("population", r.population)?;
    let groups = r
        .groups
        .iter()
        .map(|g| {
            let d = PyDict::new_bound(py);
            d.set_item("treatment", g.treatment)?;
            d.set_item("size", g.size)?;
            d.set_item("qini", g.qini)?;
            d.set_item("mape", g.mape)?;
            d.set_item("copc", g.copc)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    out.set_item("groups", groups)?;
    Ok(out)
}

/// Full study: returns `{"runs": [...], "summary": [...], "balance": [...]}`.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn run_experiment<'py>(py: Python<'py>, config: Option<&PyExperimentConfig>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = dgp_config(config);
    let res = py.allow_threads(|| experiment::run_experiment(&cfg)).map_err(to_py)?;
    let runs = res
        .runs
        .iter()
        .map(|r| {
            let d = PyDict::new_bound(py);
            d.set_item("repetition", r.repetition)?;
            d.set_item("arm", r.arm.as_str())?;
            d.set_item("ratio", r.ratio)?;
            d.set_item("test_set", r.test_set.as_str())?;
            d.set_item("w_qini", r.w_qini)?;
            d.set_item("w_mape", r.w_mape)?;
            d.set_item("w_copc", r.w_copc)?;
            d.set_item("coverage", r.coverage)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    let summary = res
        .summary()
        .iter()
        .map(|s| {
            let d = PyDict::new_bound(py);
            d.set_item("arm", s.arm.as_str())?;
            d.set_item("ratio", s.ratio)?;
            d.set_item("test_set", s.test_set.as_str())?;
            for (name, v) in [("qini", s.qini), ("mape", s.mape), ("copc", s.copc)] {
                d.set_item(format!("{name}_mean"), v.mean)?;
                d.set_item(format!("{name}_sd"), v.sd)?;
            }
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    let balance = res
        .balance
        .iter()
        .map(|b| {
            let d = PyDict::new_bound(py);
            d.set_item("repetition", b.repetition)?;
            d.set_item("dataset", b.dataset.as_str())?;
            d.set_item("ratio", b.ratio)?;
            d.set_item("mean_smd", b.mean_smd)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    let out = PyDict::new_bound(py);
    out.set_item("runs", runs)?;
    out.set_item("summary", summary)?;
    out.set_item("balance", balance)?;
    Ok(out)
}

/// The default configuration as TOML.
#[pyfunction]
fn default_config_toml() -> String {
    experiment::ExperimentConfig::paper_default().to_toml_string()
}

#[pymodule]
fn _native(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyExperimentConfig>()?;
    m.add_class::<PyUpliftModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(rct_category_counts, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(random_fuse, m)?)?;
    m.add_function(wrap_pyfunction!(mean_smd, m)?)?;
    m.add_function(wrap_pyfunction!(qini_coefficient, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(default_config_toml, m)?)?;
    Ok(())
}
