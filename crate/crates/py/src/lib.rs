//! Python bindings: architectures, forcing data, simulation, metrics,
//! training and experiments.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mcp::experiment::{run_experiment, ExperimentPlan};
use mcp::metrics::{annual_distribution, kge, KgeComponents};
use mcp::training::{check_model_grad, train_architecture, McpModel, Objective, TrainConfig};
use mcp::{
    generate_synthetic, ingest_forcing, mass_ledger, partition_by_year, simulate, ArchitectureSpec, Error, ForcingSeries,
    Label, ParameterVector, PartitionMask, SimOptions, SyntheticClimate, SyntheticTruth, SPLIT_PATTERN,
};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::NumericFault { .. } => PyArithmeticError::new_err(e.to_string()),
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Plan(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for mcp::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

/// Parsed MCP architecture, e.g. `Architecture("MC{O=sig,L=sig:con}")`.
#[pyclass(name = "Architecture", module = "mcp_py", frozen)]
struct PyArchitecture {
    inner: ArchitectureSpec,
}

#[pymethods]
impl PyArchitecture {
    #[new]
    fn new(text: &str) -> PyResult<Self> {
        Ok(PyArchitecture {
            inner: ArchitectureSpec::parse(text).py_err()?,
        })
    }

    #[getter]
    fn canonical(&self) -> String {
        self.inner.canonical()
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id()
    }

    #[getter]
    fn param_names(&self) -> Vec<String> {
        self.inner.param_names()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_names().len()
    }

    fn __repr__(&self) -> String {
        format!("Architecture({:?})", self.inner.canonical())
    }
}

/// Daily forcing with optional observed streamflow.
#[pyclass(name = "Forcing", module = "mcp_py", frozen)]
struct PyForcing {
    inner: ForcingSeries,
}

#[pymethods]
impl PyForcing {
    /// Build from ISO dates and per-day series.
    #[new]
    #[pyo3(signature = (dates, precip, pet, streamflow=None))]
    fn new(dates: Vec<String>, precip: Vec<f64>, pet: Vec<f64>, streamflow: Option<Vec<f64>>) -> PyResult<Self> {
        let dates = dates
            .iter()
            .map(|d| {
                chrono::NaiveDate::parse_from_str(d, "%Y-%m-%d")
                    .map_err(|e| PyValueError::new_err(format!("bad date `{d}`: {e}")))
            })
            .collect::<PyResult<Vec<_>>>()?;
        Ok(PyForcing {
            inner: ForcingSeries::new(dates, precip, pet, streamflow).py_err()?,
        })
    }

    #[staticmethod]
    fn from_csv(path: PathBuf) -> PyResult<Self> {
        Ok(PyForcing {
            inner: ingest_forcing(path).py_err()?,
        })
    }

    fn save_csv(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_csv(path).py_err()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dates(&self) -> Vec<String> {
        self.inner.dates().iter().map(|d| d.to_string()).collect()
    }

    #[getter]
    fn precip(&self) -> Vec<f64> {
        self.inner.precip().to_vec()
    }

    #[getter]
    fn pet(&self) -> Vec<f64> {
        self.inner.pot_loss().to_vec()
    }

    #[getter]
    fn streamflow(&self) -> Option<Vec<f64>> {
        self.inner.obs_out().map(<[f64]>::to_vec)
    }

    #[getter]
    fn digest(&self) -> String {
        self.inner.digest()
    }

    /// Subset label per day under the default year-wise split.
    #[pyo3(signature = (wy_start_month=10))]
    fn partition(&self, wy_start_month: u32) -> PyResult<Vec<Option<&'static str>>> {
        let mask = partition_by_year(&self.inner, &SPLIT_PATTERN, wy_start_month).py_err()?;
        Ok(mask.labels().iter().map(|l| l.map(Label::as_str)).collect())
    }

    fn __repr__(&self) -> String {
        format!("Forcing({} days)", self.inner.len())
    }
}

fn arch_of(arch: &Bound<'_, PyAny>) -> PyResult<ArchitectureSpec> {
    if let Ok(a) = arch.cast::<PyArchitecture>() {
        return Ok(a.get().inner.clone());
    }
    let text: String = arch.extract()?;
    ArchitectureSpec::parse(&text).py_err()
}

/// Parameters as a `{name: value}` dict or a list in layout order.
fn params_of(arch: &ArchitectureSpec, params: &Bound<'_, PyAny>) -> PyResult<ParameterVector> {
    if let Ok(d) = params.cast::<PyDict>() {
        let mut pairs: BTreeMap<String, f64> = BTreeMap::new();
        for (k, v) in d.iter() {
            pairs.insert(k.extract()?, v.extract()?);
        }
        return ParameterVector::from_pairs(arch, pairs.iter().map(|(k, v)| (k.as_str(), *v))).py_err();
    }
    let values: Vec<f64> = params.extract()?;
    ParameterVector::for_arch(arch, values).py_err()
}

fn params_dict<'py>(py: Python<'py>, p: &ParameterVector) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (name, v) in p.iter() {
        d.set_item(name, v)?;
    }
    Ok(d)
}

fn kge_dict<'py>(py: Python<'py>, k: &KgeComponents) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("alpha", k.alpha)?;
    d.set_item("beta", k.beta)?;
    d.set_item("rho", k.rho)?;
    d.set_item("kge", k.kge)?;
    d.set_item("kge_ss", k.kge_ss)?;
    Ok(d)
}

/// Number of trainable parameters of an architecture string.
#[pyfunction]
fn count_parameters(arch: &str) -> PyResult<usize> {
    Ok(ArchitectureSpec::parse(arch).py_err()?.param_names().len())
}

/// Forcing and streamflow generated by a known model.
#[pyfunction]
#[pyo3(signature = (arch, params, years, rng_seed=11, spinup_years=3))]
fn synthesize(arch: &Bound<'_, PyAny>, params: &Bound<'_, PyAny>, years: usize, rng_seed: u64, spinup_years: usize) -> PyResult<PyForcing> {
    let architecture = arch_of(arch)?;
    let params = params_of(&architecture, params)?;
    let truth = SyntheticTruth {
        architecture,
        params,
        rng_seed,
        climate: SyntheticClimate {
            spinup_years,
            ..SyntheticClimate::default()
        },
    };
    Ok(PyForcing {
        inner: generate_synthetic(&truth, years).py_err()?,
    })
}

/// Run the cell over the forcing; returns per-day series and the mass ledger.
#[pyfunction(name = "simulate")]
#[pyo3(signature = (arch, params, forcing, spinup_years=3, wy_start_month=10))]
fn py_simulate<'py>(
    py: Python<'py>,
    arch: &Bound<'_, PyAny>,
    params: &Bound<'_, PyAny>,
    forcing: &PyForcing,
    spinup_years: usize,
    wy_start_month: u32,
) -> PyResult<Bound<'py, PyDict>> {
    let mut arch = arch_of(arch)?;
    if let Some(bc) = arch.bc_gate.as_mut() {
        bc.u_max = forcing.inner.max_precip().max(1e-9);
    }
    let arch = arch.with_scaling(Default::default());
    let params = params_of(&arch, params)?;
    let opts = SimOptions {
        spinup_years,
        wy_start_month,
    };
    let trace = simulate(&arch, &params, &forcing.inner, &opts).py_err()?;
    let ledger = mass_ledger(&trace);
    let d = PyDict::new(py);
    d.set_item("x", trace.x.clone())?;
    d.set_item("outflow", trace.o.clone())?;
    d.set_item("loss", trace.l.clone())?;
    d.set_item("q_mr", trace.q_mr.clone())?;
    d.set_item("g_out", trace.g_out.clone())?;
    d.set_item("g_loss", trace.g_loss_con.clone())?;
    d.set_item("g_rem", trace.g_rem.clone())?;
    d.set_item("clamp_count", trace.clamp_count())?;
    d.set_item("mass_residual", ledger.relative_residual())?;
    Ok(d)
}

/// KGE and its skill score of `sim` against `obs`.
#[pyfunction(name = "kge")]
fn py_kge<'py>(py: Python<'py>, sim: Vec<f64>, obs: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    kge_dict(py, &kge(&sim, &obs).py_err()?)
}

/// Percentiles of the per-water-year skill of `sim` against the forcing's streamflow.
#[pyfunction]
#[pyo3(signature = (sim, forcing, wy_start_month=10))]
fn annual_kge<'py>(py: Python<'py>, sim: Vec<f64>, forcing: &PyForcing, wy_start_month: u32) -> PyResult<Bound<'py, PyDict>> {
    let obs = forcing.inner.require_obs().py_err()?;
    let a = annual_distribution(&sim, obs, forcing.inner.dates(), wy_start_month).py_err()?;
    let d = PyDict::new(py);
    for (label, v) in a.kge_ss.rows() {
        d.set_item(label, v)?;
    }
    let years = PyDict::new(py);
    for y in &a.years {
        years.set_item(y.water_year, y.metrics.map(|m| m.kge_ss))?;
    }
    d.set_item("years", years)?;
    Ok(d)
}

/// Train one architecture over several seeds with the default year-wise split.
#[pyfunction]
#[pyo3(signature = (arch, forcing, seeds=None, epochs=200, jobs=0, spinup_years=3, wy_start_month=10))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    arch: &Bound<'_, PyAny>,
    forcing: &PyForcing,
    seeds: Option<Vec<u64>>,
    epochs: usize,
    jobs: usize,
    spinup_years: usize,
    wy_start_month: u32,
) -> PyResult<Bound<'py, PyDict>> {
    let mut arch = arch_of(arch)?;
    if let Some(bc) = arch.bc_gate.as_mut() {
        bc.u_max = forcing.inner.max_precip().max(1e-9);
    }
    let arch = arch.with_scaling(Default::default());
    let mut cfg = TrainConfig {
        epochs,
        jobs,
        ..TrainConfig::default()
    };
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    cfg.sim = SimOptions {
        spinup_years,
        wy_start_month,
    };
    let fs = &forcing.inner;
    let outcome = py
        .detach(|| {
            let mask = partition_by_year(fs, &SPLIT_PATTERN, wy_start_month)?;
            train_architecture(&arch, fs, &mask, &cfg, &BTreeMap::new())
        })
        .py_err()?;
    let best = outcome.best();
    let d = PyDict::new(py);
    d.set_item("best_seed", best.seed)?;
    d.set_item("params", params_dict(py, &best.params)?)?;
    d.set_item("train", best.scores.train)?;
    d.set_item("select", best.scores.select)?;
    d.set_item("test", best.scores.test)?;
    d.set_item("loss_history", best.history.iter().map(|h| h.loss).collect::<Vec<_>>())?;
    let seeds: Vec<(u64, Option<f64>)> = outcome.runs.iter().map(|r| (r.seed, r.selection_score())).collect();
    d.set_item("runs", seeds)?;
    Ok(d)
}

/// Largest relative difference between analytic and finite-difference
/// gradients of 1 - KGE_ss over the whole forcing.
#[pyfunction]
#[pyo3(signature = (arch, params, forcing, h=1e-6, tol=1e-4))]
fn grad_check<'py>(
    py: Python<'py>,
    arch: &Bound<'_, PyAny>,
    params: &Bound<'_, PyAny>,
    forcing: &PyForcing,
    h: f64,
    tol: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let mut arch = arch_of(arch)?;
    if let Some(bc) = arch.bc_gate.as_mut() {
        bc.u_max = forcing.inner.max_precip().max(1e-9);
    }
    let arch = arch.with_scaling(Default::default());
    let params = params_of(&arch, params)?;
    let fs = &forcing.inner;
    let opts = SimOptions {
        spinup_years: 0,
        ..SimOptions::default()
    };
    let model = McpModel::new(&arch, fs, &opts).py_err()?;
    let objective = Objective::new(fs, &PartitionMask::uniform(fs.len(), Label::Train)).py_err()?;
    let r = check_model_grad(&model, &objective, params.values(), h, tol).py_err()?;
    let d = PyDict::new(py);
    d.set_item("max_rel_error", r.max_rel_error)?;
    d.set_item("rel_errors", r.rel_errors.clone())?;
    d.set_item("passed", r.passed())?;
    Ok(d)
}

/// Run an experiment plan file; returns the comparison rows as JSON text.
#[pyfunction(name = "run_experiment")]
#[pyo3(signature = (plan_path, resume=false))]
fn py_run_experiment(py: Python<'_>, plan_path: PathBuf, resume: bool) -> PyResult<String> {
    let plan = ExperimentPlan::load(&plan_path).py_err()?;
    let outcome = py.detach(|| run_experiment(&plan, resume)).py_err()?;
    serde_json::to_string(&outcome.comparison).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn mcp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyArchitecture>()?;
    m.add_class::<PyForcing>()?;
    m.add_function(wrap_pyfunction!(count_parameters, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(py_simulate, m)?)?;
    m.add_function(wrap_pyfunction!(py_kge, m)?)?;
    m.add_function(wrap_pyfunction!(annual_kge, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(py_run_experiment, m)?)?;
    Ok(())
}
