//! Python bindings. Arrays cross the boundary as lists of floats.

use dcq_core::estimator::{aggregate, fit_alad, fit_composite, oracle_ll_at, select_oracle_bandwidth, FitConfig};
use dcq_core::experiments::{run_replications, ErrorBase, ErrorDistributionSpec, ExperimentConfig, Model, SplitPolicy};
use dcq_core::io::{BatchAssignment, Dataset};
use dcq_core::numeric::linspace;
use dcq_core::{CompositePlan, KernelSpec, ObservationBatch};
use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(
    dcq,
    EstimationError,
    PyRuntimeError,
    "Estimation failed on valid input."
);

fn to_py(e: dcq_core::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        EstimationError::new_err(e.to_string())
    }
}

fn assignment(name: &str) -> PyResult<BatchAssignment> {
    match name {
        "contiguous" => Ok(BatchAssignment::Contiguous),
        "round-robin" | "round_robin" => Ok(BatchAssignment::RoundRobin),
        other => Err(PyValueError::new_err(format!(
            "assignment must be 'contiguous' or 'round-robin', got {other:?}"
        ))),
    }
}

fn batches(
    xs: Vec<f64>,
    ys: Vec<f64>,
    m: usize,
    batch_ids: Option<Vec<i64>>,
    assign: &str,
) -> PyResult<Vec<ObservationBatch>> {
    let ds = Dataset { xs, ys, batch_ids };
    ds.into_batches(m, assignment(assign)?).map_err(to_py)
}

fn grid_for(xs: &[f64], grid: Option<Vec<f64>>, n_grid: usize) -> PyResult<Vec<f64>> {
    if let Some(g) = grid {
        return Ok(g);
    }
    if xs.is_empty() || n_grid < 2 {
        return Err(PyValueError::new_err("need data and n_grid >= 2"));
    }
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(linspace(lo, hi, n_grid))
}

fn kernel(name: &str) -> PyResult<KernelSpec> {
    KernelSpec::from_name(name).map_err(to_py)
}

/// Fits the composite estimator. Returns a dict with the grid, the global
/// curve, the local values, the serialized plan and diagnostics.
#[pyfunction]
#[pyo3(signature = (xs, ys, m, *, grid=None, n_grid=200, j=5, d_tau=0.5, kernel="epanechnikov", h_oll=None, seed=0, assignment="contiguous", batch_ids=None))]
#[allow(clippy::too_many_arguments)]
fn fit<'py>(
    py: Python<'py>,
    xs: Vec<f64>,
    ys: Vec<f64>,
    m: usize,
    grid: Option<Vec<f64>>,
    n_grid: usize,
    j: usize,
    d_tau: f64,
    kernel: &str,
    h_oll: Option<f64>,
    seed: u64,
    assignment: &str,
    batch_ids: Option<Vec<i64>>,
) -> PyResult<Bound<'py, PyDict>> {
    let grid_x = grid_for(&xs, grid, n_grid)?;
    let cfg = FitConfig {
        j,
        d_tau,
        kernel: self::kernel(kernel)?,
        h_oll,
        cv_seed: seed,
        ..FitConfig::default()
    };
    let bs = batches(xs, ys, m, batch_ids, assignment)?;
    let f = py.detach(|| fit_composite(&bs, &cfg, &grid_x)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("grid_x", &f.grid_x)?;
    d.set_item("values", &f.global_values)?;
    d.set_item("local_values", &f.local_values)?;
    d.set_item("weights", &f.plan.weights)?;
    d.set_item("bandwidths", &f.plan.bandwidths)?;
    d.set_item("levels", f.plan.grid.levels())?;
    d.set_item("tau_bar", f.plan.grid.tau_bar())?;
    d.set_item("plan", f.plan.to_text())?;
    d.set_item("h_oll", f.diagnostics.h_oll)?;
    d.set_item("are", f.diagnostics.are)?;
    d.set_item("widened_cells", f.diagnostics.widened_cells)?;
    d.set_item("uncertified_cells", f.diagnostics.uncertified_cells)?;
    Ok(d)
}

/// Re-aggregates local values with a serialized plan.
#[pyfunction]
fn predict(py: Python<'_>, plan: &str, local_values: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let plan = CompositePlan::from_text(plan).map_err(to_py)?;
    py.detach(|| aggregate(&plan.weights, &local_values)).map_err(to_py)
}

/// Average of per-batch local medians with bandwidth `h`.
#[pyfunction]
#[pyo3(signature = (xs, ys, m, h, *, grid=None, n_grid=200, kernel="epanechnikov", assignment="contiguous"))]
#[allow(clippy::too_many_arguments)]
fn alad(
    py: Python<'_>,
    xs: Vec<f64>,
    ys: Vec<f64>,
    m: usize,
    h: f64,
    grid: Option<Vec<f64>>,
    n_grid: usize,
    kernel: &str,
    assignment: &str,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let grid_x = grid_for(&xs, grid, n_grid)?;
    let k = self::kernel(kernel)?;
    let bs = batches(xs, ys, m, None, assignment)?;
    let v = py.detach(|| fit_alad(&bs, &grid_x, h, &k)).map_err(to_py)?;
    Ok((grid_x, v))
}

/// Full-data local linear least squares. Without `h` the bandwidth is chosen
/// by 5-fold cross-validation. Returns `(grid, values, h)`.
#[pyfunction]
#[pyo3(signature = (xs, ys, *, h=None, grid=None, n_grid=200, kernel="epanechnikov", seed=0))]
#[allow(clippy::too_many_arguments)]
fn oracle(
    py: Python<'_>,
    xs: Vec<f64>,
    ys: Vec<f64>,
    h: Option<f64>,
    grid: Option<Vec<f64>>,
    n_grid: usize,
    kernel: &str,
    seed: u64,
) -> PyResult<(Vec<f64>, Vec<f64>, f64)> {
    let grid_x = grid_for(&xs, grid, n_grid)?;
    let k = self::kernel(kernel)?;
    let data = ObservationBatch::new(xs, ys, 0).map_err(to_py)?;
    let cfg = FitConfig::default();
    let (v, h) = py
        .detach(|| {
            let h = match h {
                Some(h) => h,
                None => select_oracle_bandwidth(
                    &data,
                    &grid_x,
                    &k,
                    cfg.oracle_bandwidth,
                    cfg.cv_folds,
                    cfg.cv_candidates,
                    seed,
                )?,
            };
            oracle_ll_at(&data, &grid_x, h, &k).map(|v| (v, h))
        })
        .map_err(to_py)?;
    Ok((grid_x, v, h))
}

fn error_base(family: &str, params: &[f64]) -> PyResult<ErrorBase> {
    let need = |k: usize| -> PyResult<()> {
        if params.len() == k {
            Ok(())
        } else {
            Err(PyValueError::new_err(format!(
                "family {family:?} takes {k} parameter(s), got {}",
                params.len()
            )))
        }
    };
    let base = match family {
        "normal" => need(0).map(|_| ErrorBase::Normal)?,
        "laplace" => need(0).map(|_| ErrorBase::Laplace)?,
        "uniform" => need(0).map(|_| ErrorBase::Uniform)?,
        "t" => need(1).map(|_| ErrorBase::T { df: params[0] })?,
        "f" => need(2).map(|_| ErrorBase::F {
            d1: params[0],
            d2: params[1],
        })?,
        "gamma" => need(2).map(|_| ErrorBase::Gamma {
            shape: params[0],
            scale: params[1],
        })?,
        "lognormal" => need(2).map(|_| ErrorBase::Lognormal {
            mu: params[0],
            sigma: params[1],
        })?,
        other => return Err(PyValueError::new_err(format!("unknown error family {other:?}"))),
    };
    Ok(base)
}

/// Monte Carlo replications. Returns one dict per RASE row.
#[pyfunction]
#[pyo3(signature = (n, m, *, replications=100, family="normal", params=Vec::new(), mix=0.0, heteroscedastic=false, balanced=false, seed=1, n_grid=200))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    n: usize,
    m: Vec<usize>,
    replications: usize,
    family: &str,
    params: Vec<f64>,
    mix: f64,
    heteroscedastic: bool,
    balanced: bool,
    seed: u64,
    n_grid: usize,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = ExperimentConfig {
        model: if heteroscedastic {
            Model::Heteroscedastic
        } else {
            Model::Homoscedastic
        },
        n,
        m_values: m,
        error: ErrorDistributionSpec::new(error_base(family, &params)?, mix).map_err(to_py)?,
        replications,
        seed,
        n_grid,
        split: if balanced {
            SplitPolicy::Balanced
        } else {
            SplitPolicy::Equal
        },
        ..ExperimentConfig::default()
    };
    cfg.validate().map_err(to_py)?;
    let report = py.detach(|| run_replications(&cfg)).map_err(to_py)?;
    report
        .rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("distribution", &r.distribution)?;
            d.set_item("lambda", r.lambda)?;
            d.set_item("m", r.m)?;
            d.set_item("first", r.pair.0.label())?;
            d.set_item("second", r.pair.1.label())?;
            d.set_item("mean_rase", r.mean)?;
            d.set_item("std_rase", r.std)?;
            d.set_item("replications", r.replications)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn dcq(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("EstimationError", m.py().get_type::<EstimationError>())?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(alad, m)?)?;
    m.add_function(wrap_pyfunction!(oracle, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
