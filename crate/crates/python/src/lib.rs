//! Python bindings: datasets, propensity fitting, matching, the four
//! bootstrap methods and the balance/coverage metrics.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError};
use pyo3::prelude::*;

use treatboot::matching::ScoredUnit;
use treatboot::metrics::{BalanceScale, SdKind};
use treatboot::runner::{self, ExperimentPlan};
use treatboot::{BootstrapConfig, BootstrapMethod, Estimand, MatchAlgorithm, MatchSpec};

create_exception!(pytreatboot, TreatbootError, PyException);

fn to_py(e: treatboot::Error) -> PyErr {
    match e {
        treatboot::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        e => TreatbootError::new_err(format!("{}: {e}", e.kind())),
    }
}

fn unknown(what: &str, s: &str) -> PyErr {
    TreatbootError::new_err(format!("config: unknown {what} '{s}'"))
}

fn match_spec(caliper: f64, algorithm: &str) -> PyResult<MatchSpec> {
    let algorithm = match algorithm {
        "optimal" => MatchAlgorithm::Optimal,
        "greedy" | "greedy_nearest" => MatchAlgorithm::GreedyNearest,
        other => return Err(unknown("algorithm", other)),
    };
    Ok(MatchSpec {
        caliper,
        algorithm,
        ..Default::default()
    })
}

#[pyclass(module = "pytreatboot", name = "Dataset", frozen)]
pub struct PyDataset {
    inner: treatboot::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Rows of covariates, binary treatment labels and outcomes.
    #[new]
    fn new(covariates: Vec<Vec<f64>>, treatment: Vec<bool>, outcome: Vec<f64>) -> PyResult<Self> {
        let inner = treatboot::Dataset::from_rows(&covariates, treatment, outcome).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, outcome, covariates, treatment=None))]
    fn from_csv(path: PathBuf, outcome: String, covariates: Vec<String>, treatment: Option<String>) -> PyResult<Self> {
        let manifest = treatboot::Manifest {
            treatment,
            outcome,
            covariates,
        };
        let inner = treatboot::load_dataset(path, &manifest).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(rows={}, covariates={}, treated={})",
            self.inner.len(),
            self.inner.n_covariates(),
            self.inner.n_treated()
        )
    }

    #[getter]
    fn n_covariates(&self) -> usize {
        self.inner.n_covariates()
    }

    #[getter]
    fn n_treated(&self) -> usize {
        self.inner.n_treated()
    }

    #[getter]
    fn n_control(&self) -> usize {
        self.inner.n_control()
    }

    #[getter]
    fn covariate_names(&self) -> Vec<String> {
        self.inner.covariate_names().to_vec()
    }

    #[getter]
    fn treatment(&self) -> Vec<bool> {
        self.inner.treatment().to_vec()
    }

    #[getter]
    fn outcome(&self) -> Vec<f64> {
        self.inner.outcome().to_vec()
    }

    fn row(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.len() {
            return Err(pyo3::exceptions::PyIndexError::new_err(i));
        }
        Ok(self.inner.row(i).to_vec())
    }

    /// (treated row indices, control row indices)
    fn split(&self) -> (Vec<usize>, Vec<usize>) {
        treatboot::split_by_treatment(&self.inner)
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_csv(path).map_err(to_py)
    }
}

#[pyclass(module = "pytreatboot", name = "PropensityModel", frozen, get_all)]
pub struct PyPropensityModel {
    intercept: f64,
    coefficients: Vec<f64>,
    scores: Vec<f64>,
    converged: bool,
    iterations: usize,
    separated: bool,
}

#[pymethods]
impl PyPropensityModel {
    fn score(&self, x: Vec<f64>) -> PyResult<f64> {
        if x.len() != self.coefficients.len() {
            return Err(to_py(treatboot::Error::DimensionMismatch {
                expected: self.coefficients.len(),
                got: x.len(),
            }));
        }
        let eta = self.intercept + x.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum::<f64>();
        Ok(treatboot::propensity::logistic(eta))
    }

    fn __repr__(&self) -> String {
        format!(
            "PropensityModel(intercept={:.4}, coefficients={:?}, converged={})",
            self.intercept, self.coefficients, self.converged
        )
    }
}

impl From<treatboot::PropensityModel> for PyPropensityModel {
    fn from(m: treatboot::PropensityModel) -> Self {
        Self {
            intercept: m.intercept,
            coefficients: m.coefficients,
            scores: m.scores,
            converged: m.converged,
            iterations: m.iterations,
            separated: m.separated,
        }
    }
}

#[pyfunction]
#[pyo3(signature = (dataset, ridge=0.0))]
fn fit_propensity(dataset: &PyDataset, ridge: f64) -> PyResult<PyPropensityModel> {
    let opts = treatboot::FitOptions {
        ridge,
        ..Default::default()
    };
    treatboot::propensity::fit_propensity_with(&dataset.inner, &opts)
        .map(Into::into)
        .map_err(to_py)
}

#[pyclass(module = "pytreatboot", name = "MatchedSample", frozen)]
pub struct PyMatchedSample {
    inner: treatboot::MatchedSample,
}

#[pymethods]
impl PyMatchedSample {
    /// List of (treated row, control row, distance).
    #[getter]
    fn pairs(&self) -> Vec<(usize, usize, f64)> {
        self.inner
            .pairs
            .iter()
            .map(|p| (p.treated.0, p.control.0, p.distance))
            .collect()
    }

    #[getter]
    fn dropped_treated(&self) -> Vec<usize> {
        self.inner.dropped_treated.iter().map(|u| u.0).collect()
    }

    #[getter]
    fn total_distance(&self) -> f64 {
        self.inner.total_distance
    }

    fn __len__(&self) -> usize {
        self.inner.n_pairs()
    }
}

/// Matches `(row, score)` treated units to `(row, score)` controls. Treated
/// rows may repeat (bootstrap resamples); each control is used at most once.
#[pyfunction]
#[pyo3(signature = (treated, controls, caliper=treatboot::matching::DEFAULT_CALIPER, algorithm="optimal"))]
fn match_pairs(
    py: Python<'_>,
    treated: Vec<(usize, f64)>,
    controls: Vec<(usize, f64)>,
    caliper: f64,
    algorithm: &str,
) -> PyResult<PyMatchedSample> {
    let spec = match_spec(caliper, algorithm)?;
    let t: Vec<ScoredUnit> = treated.into_iter().map(|(u, s)| ScoredUnit::new(u, s)).collect();
    let c: Vec<ScoredUnit> = controls.into_iter().map(|(u, s)| ScoredUnit::new(u, s)).collect();
    py.detach(|| treatboot::match_resample(&t, &c, &spec))
        .map(|inner| PyMatchedSample { inner })
        .map_err(to_py)
}

#[pyfunction]
fn att_estimate(dataset: &PyDataset, matched: &PyMatchedSample) -> PyResult<f64> {
    treatboot::att_estimate(&dataset.inner, &matched.inner)
        .map(|e| e.value)
        .map_err(to_py)
}

#[pyclass(module = "pytreatboot", name = "BootstrapResult", frozen, get_all)]
pub struct PyBootstrapResult {
    method: String,
    replicate_atts: Vec<f64>,
    point_estimate: f64,
    se: f64,
    ci_low: f64,
    ci_high: f64,
    replicate_masmd: Vec<f64>,
    n_failed: usize,
    n_pairs: usize,
    n_dropped: usize,
    json: String,
}

#[pymethods]
impl PyBootstrapResult {
    fn to_json(&self) -> String {
        self.json.clone()
    }

    fn traps(&self, value: f64) -> bool {
        self.ci_low <= value && value <= self.ci_high
    }

    fn __repr__(&self) -> String {
        format!(
            "BootstrapResult(method={}, estimate={:.4}, se={:.4}, ci=({:.4}, {:.4}))",
            self.method, self.point_estimate, self.se, self.ci_low, self.ci_high
        )
    }
}

impl TryFrom<treatboot::BootstrapResult> for PyBootstrapResult {
    type Error = PyErr;

    fn try_from(r: treatboot::BootstrapResult) -> PyResult<Self> {
        let json = serde_json::to_string(&r).map_err(|e| to_py(e.into()))?;
        Ok(Self {
            method: r.method.name().to_string(),
            replicate_atts: r.replicate_atts,
            point_estimate: r.point_estimate,
            se: r.se,
            ci_low: r.ci_low,
            ci_high: r.ci_high,
            replicate_masmd: r.replicate_masmd,
            n_failed: r.n_failed,
            n_pairs: r.n_pairs,
            n_dropped: r.n_dropped,
            json,
        })
    }
}

/// Fits, matches and bootstraps `dataset` with one of `treatment`,
/// `separate`, `paired` or `whole_sample`.
#[pyfunction]
#[pyo3(signature = (
    dataset, method="treatment", B=500, seed=0, caliper=treatboot::matching::DEFAULT_CALIPER,
    refit_propensity=false, estimand="att", max_failure_fraction=0.1
))]
#[allow(non_snake_case, clippy::too_many_arguments)]
fn run_bootstrap(
    py: Python<'_>,
    dataset: &PyDataset,
    method: &str,
    B: usize,
    seed: u64,
    caliper: f64,
    refit_propensity: bool,
    estimand: &str,
    max_failure_fraction: f64,
) -> PyResult<PyBootstrapResult> {
    let estimand = match estimand {
        "att" => Estimand::Att,
        "atc" => Estimand::Atc,
        other => return Err(unknown("estimand", other)),
    };
    let cfg = BootstrapConfig {
        refit_propensity,
        estimand,
        max_failure_fraction,
        match_spec: match_spec(caliper, "optimal")?,
        ..BootstrapConfig::new(method.parse().map_err(|_| unknown("method", method))?, B, seed)
    };
    let d = &dataset.inner;
    py.detach(|| treatboot::run_bootstrap(d, &cfg))
        .map_err(to_py)?
        .try_into()
}

/// (se, ci_low, ci_high) of replicate estimates around `point`.
#[pyfunction]
fn summarize(replicates: Vec<f64>, point: f64) -> PyResult<(f64, f64, f64)> {
    treatboot::summarize(&replicates, point)
        .map(|i| (i.se, i.ci_low, i.ci_high))
        .map_err(to_py)
}

/// Maximum absolute standardized mean difference between the listed treated
/// and control rows, scaled by the treated (`"treated"`) or pooled SDs of
/// the whole dataset.
#[pyfunction]
#[pyo3(signature = (dataset, treated, controls, sd="treated"))]
fn masmd(dataset: &PyDataset, treated: Vec<usize>, controls: Vec<usize>, sd: &str) -> PyResult<f64> {
    let kind = match sd {
        "treated" => SdKind::Treated,
        "pooled" => SdKind::Pooled,
        other => return Err(unknown("sd kind", other)),
    };
    let n = dataset.inner.len();
    if let Some(&bad) = treated.iter().chain(&controls).find(|&&i| i >= n) {
        return Err(pyo3::exceptions::PyIndexError::new_err(bad));
    }
    let scale = BalanceScale::from_sample(&dataset.inner, kind);
    treatboot::masmd(&dataset.inner, &treated, &controls, &scale).map_err(to_py)
}

#[pyfunction]
fn coverage(intervals: Vec<(f64, f64)>, truth: f64) -> f64 {
    treatboot::coverage(&intervals, truth)
}

#[pyfunction]
fn overlap_size(treated_scores: Vec<f64>, control_scores: Vec<f64>) -> f64 {
    treatboot::overlap_size(&treated_scores, &control_scores)
}

#[pyfunction]
#[pyo3(signature = (treated_scores, control_scores, caliper=treatboot::matching::DEFAULT_CALIPER))]
fn avg_potential_matches(treated_scores: Vec<f64>, control_scores: Vec<f64>, caliper: f64) -> f64 {
    treatboot::avg_potential_matches(&treated_scores, &control_scores, caliper)
}

/// Draws `n` rows from a simulated population with the given treatment
/// prevalence.
#[pyfunction]
#[pyo3(signature = (prevalence, n, superpop_size=100_000, seed=0, population_seed=20240501))]
fn simulate_sample(
    py: Python<'_>,
    prevalence: f64,
    n: usize,
    superpop_size: usize,
    seed: u64,
    population_seed: u64,
) -> PyResult<PyDataset> {
    let cfg = treatboot::DgpConfig {
        superpop_size,
        seed: population_seed,
        ..treatboot::DgpConfig::with_prevalence(prevalence)
    };
    py.detach(|| {
        let sp = treatboot::generate_superpopulation(&cfg)?;
        treatboot::draw_sample(&sp, n, seed)
    })
    .map(|inner| PyDataset { inner })
    .map_err(to_py)
}

/// Runs a scenario grid from a JSON plan string and returns the summary CSV.
#[pyfunction]
fn run_grid(py: Python<'_>, plan_json: &str) -> PyResult<String> {
    let plan: ExperimentPlan = serde_json::from_str(plan_json).map_err(|e| to_py(e.into()))?;
    py.detach(|| runner::run_grid(&plan))
        .map(|rows| runner::summary_csv(&rows))
        .map_err(to_py)
}

#[pymodule]
fn pytreatboot(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("TreatbootError", m.py().get_type::<TreatbootError>())?;
    m.add("BOOTSTRAP_METHODS", BootstrapMethod::ALL.map(|b| b.name()).to_vec())?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyPropensityModel>()?;
    m.add_class::<PyMatchedSample>()?;
    m.add_class::<PyBootstrapResult>()?;
    m.add_function(wrap_pyfunction!(fit_propensity, m)?)?;
    m.add_function(wrap_pyfunction!(match_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(att_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(run_bootstrap, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(masmd, m)?)?;
    m.add_function(wrap_pyfunction!(coverage, m)?)?;
    m.add_function(wrap_pyfunction!(overlap_size, m)?)?;
    m.add_function(wrap_pyfunction!(avg_potential_matches, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_sample, m)?)?;
    m.add_function(wrap_pyfunction!(run_grid, m)?)?;
    Ok(())
}
