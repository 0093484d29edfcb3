//! Python bindings for the dual-system table estimators.
//!
//! Exposes observed data, full tables, both estimators, the assumption
//! checks, and the simulator. Parse errors and assumption violations raise
//! `ValueError`; numerical failures raise `RuntimeError`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dse_core::cd::build_standard_cd;
use dse_core::em::{run_em, EmInit, EmOptions};
use dse_core::fast::{run_fast, FixpointOptions};
use dse_core::io::{format_observed, format_table, parse_observed, parse_table};
use dse_core::regression::{loglik, SolverOptions};
use dse_core::simulate::{gen_instance, SimSpec};
use dse_core::table::{max_rel_change, Dims, FullIndex, FullTable, ObservedData};
use dse_core::validate::{validate_positive, validate_structural};
use dse_core::Error;

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Parse { .. }
        | Error::InvalidInput(_)
        | Error::Io(_)
        | Error::StructuralViolation { .. }
        | Error::MissingCorrespondence { .. }
        | Error::NonStandardMissingCode { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Observed counts keyed by source pattern and (possibly missing) categories.
#[pyclass(name = "ObservedData", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyObservedData {
    inner: ObservedData,
}

#[pymethods]
impl PyObservedData {
    /// Parses `i,j,k,l,count` CSV text.
    #[staticmethod]
    fn from_csv(text: &str) -> PyResult<Self> {
        let inner = parse_observed(text).map_err(to_py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n_a(&self) -> usize {
        self.inner.dims().n_a()
    }

    #[getter]
    fn n_b(&self) -> usize {
        self.inner.dims().n_b()
    }

    #[getter]
    fn keys(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn total(&self) -> f64 {
        self.inner.total()
    }

    fn to_csv(&self) -> String {
        format_observed(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "ObservedData({} grid, {} keys, total {})",
            self.inner.dims(),
            self.inner.len(),
            self.inner.total()
        )
    }
}

/// A full contingency table over all four observability quadrants.
#[pyclass(name = "Table", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTable {
    inner: FullTable,
}

#[pymethods]
impl PyTable {
    /// Parses `i,j,k,l,y` CSV text covering every cell exactly once.
    #[staticmethod]
    fn from_csv(text: &str) -> PyResult<Self> {
        let inner = parse_table(text).map_err(to_py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n_a(&self) -> usize {
        self.inner.dims().n_a()
    }

    #[getter]
    fn n_b(&self) -> usize {
        self.inner.dims().n_b()
    }

    #[getter]
    fn total(&self) -> f64 {
        self.inner.total()
    }

    /// Value at cell `(i, j, k, l)`.
    fn get(&self, i: u8, j: u8, k: usize, l: usize) -> PyResult<f64> {
        let idx = FullIndex::new(i, j, k, l).map_err(to_py_err)?;
        if !idx.in_bounds(self.inner.dims()) {
            return Err(PyValueError::new_err(format!(
                "cell {idx} out of bounds for a {} grid",
                self.inner.dims()
            )));
        }
        Ok(self.inner.get(&idx))
    }

    /// Total over one observability quadrant.
    fn quadrant_total(&self, i: u8, j: u8) -> PyResult<f64> {
        if i > 1 || j > 1 {
            return Err(PyValueError::new_err("quadrant flags must be 0 or 1"));
        }
        Ok(self.inner.quadrant_total(i, j))
    }

    /// All cell values in enumeration order.
    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    /// Largest relative cellwise difference against another table.
    fn max_rel_diff(&self, other: &PyTable) -> PyResult<f64> {
        if self.inner.dims() != other.inner.dims() {
            return Err(PyValueError::new_err("grid sizes differ"));
        }
        Ok(max_rel_change(self.inner.values(), other.inner.values()))
    }

    fn to_csv(&self) -> String {
        format_table(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "Table({} grid, total {:.1}, unobserved {:.1})",
            self.inner.dims(),
            self.inner.total(),
            self.inner.quadrant_total(0, 0)
        )
    }
}

/// Outcome of the reference (EM) estimator.
#[pyclass(name = "EmResult", frozen)]
struct PyEmResult {
    #[pyo3(get)]
    table: PyTable,
    #[pyo3(get)]
    params: Vec<f64>,
    #[pyo3(get)]
    converged: bool,
    #[pyo3(get)]
    iterations: usize,
    #[pyo3(get)]
    loglik: f64,
}

#[pymethods]
impl PyEmResult {
    fn __repr__(&self) -> String {
        format!(
            "EmResult(converged={}, iterations={}, population={:.1})",
            if self.converged { "True" } else { "False" },
            self.iterations,
            self.table.inner.total()
        )
    }
}

/// Outcome of the fast fixed-point estimator.
#[pyclass(name = "FastResult", frozen)]
struct PyFastResult {
    #[pyo3(get)]
    table: PyTable,
    #[pyo3(get)]
    params: Vec<f64>,
    #[pyo3(get)]
    converged: bool,
    #[pyo3(get)]
    iterations: (usize, usize, usize),
    #[pyo3(get)]
    exact_fit: bool,
    #[pyo3(get)]
    clamped: bool,
    #[pyo3(get)]
    warnings: Vec<String>,
    #[pyo3(get)]
    loglik: f64,
}

#[pymethods]
impl PyFastResult {
    fn __repr__(&self) -> String {
        format!(
            "FastResult(converged={}, exact_fit={}, population={:.1})",
            if self.converged { "True" } else { "False" },
            if self.exact_fit { "True" } else { "False" },
            self.table.inner.total()
        )
    }
}

/// A simulated instance: the generated truth and what remains observable.
#[pyclass(name = "SimResult", frozen)]
struct PySimResult {
    #[pyo3(get)]
    data: PyObservedData,
    #[pyo3(get)]
    truth: PyTable,
    #[pyo3(get)]
    attempts: usize,
}

#[pymethods]
impl PySimResult {
    fn __repr__(&self) -> String {
        format!(
            "SimResult({} grid, observed total {:.1})",
            self.truth.inner.dims(),
            self.data.inner.total()
        )
    }
}

/// Checks the structural and positivity assumptions under the standard
/// missing-code correspondence. Returns a dict of check name to bool plus a
/// combined "ok" entry.
#[pyfunction]
fn validate<'py>(py: Python<'py>, data: &PyObservedData) -> PyResult<Bound<'py, PyDict>> {
    let cd = build_standard_cd(&data.inner).map_err(to_py_err)?;
    let structural = validate_structural(&cd);
    let positive = validate_positive(&cd, &data.inner);
    let out = PyDict::new(py);
    out.set_item(
        "quadrant_preservation",
        structural.quadrant_preservation.is_none(),
    )?;
    out.set_item(
        "unobservable_quadrant",
        structural.unobservable_quadrant.is_none(),
    )?;
    out.set_item("range_closure", structural.range_closure.is_none())?;
    out.set_item("matched_witness", positive.matched_cell.is_none())?;
    out.set_item("row_witnesses", positive.row.is_none())?;
    out.set_item("col_witnesses", positive.col.is_none())?;
    out.set_item("ok", structural.all_pass() && positive.all_pass())?;
    Ok(out)
}

fn solver() -> SolverOptions {
    SolverOptions::default()
}

/// Reference estimator: alternating redistribution and model fitting.
#[pyfunction]
#[pyo3(signature = (data, tol=None, max_iters=None, proportional_init=false))]
fn estimate_em(
    data: &PyObservedData,
    tol: Option<f64>,
    max_iters: Option<usize>,
    proportional_init: bool,
) -> PyResult<PyEmResult> {
    let cd = build_standard_cd(&data.inner).map_err(to_py_err)?;
    let mut opts = EmOptions {
        init: if proportional_init {
            EmInit::ProportionalSpread
        } else {
            EmInit::AllOnes
        },
        ..EmOptions::default()
    };
    if let Some(tol) = tol {
        opts.tol = tol;
    }
    if let Some(iters) = max_iters {
        opts.max_iterations = iters;
    }
    let outcome = run_em(&data.inner, &cd, &opts, &solver()).map_err(to_py_err)?;
    let ll = loglik(&outcome.table, &outcome.params);
    Ok(PyEmResult {
        table: PyTable {
            inner: outcome.table,
        },
        params: outcome.params.values().to_vec(),
        converged: outcome.trace.converged,
        iterations: outcome.trace.iterations(),
        loglik: ll,
    })
}

/// Fast estimator: three marginal fixed points plus closed-form assembly.
#[pyfunction]
#[pyo3(signature = (data, tol=None, max_iters=None, delta_clamp=0.0))]
fn estimate_fast(
    data: &PyObservedData,
    tol: Option<f64>,
    max_iters: Option<usize>,
    delta_clamp: f64,
) -> PyResult<PyFastResult> {
    let cd = build_standard_cd(&data.inner).map_err(to_py_err)?;
    let mut opts = FixpointOptions {
        delta_clamp,
        ..FixpointOptions::default()
    };
    if let Some(tol) = tol {
        opts.tol = tol;
    }
    if let Some(iters) = max_iters {
        opts.max_iterations = iters;
    }
    let outcome = run_fast(&data.inner, &cd, &opts, &solver()).map_err(to_py_err)?;
    let ll = loglik(&outcome.table, &outcome.params);
    Ok(PyFastResult {
        table: PyTable {
            inner: outcome.table,
        },
        params: outcome.params.values().to_vec(),
        converged: outcome.match_trace.converged
            && outcome.row_trace.converged
            && outcome.col_trace.converged,
        iterations: (
            outcome.match_trace.iterations,
            outcome.row_trace.iterations,
            outcome.col_trace.iterations,
        ),
        exact_fit: outcome.solve_stats.exact_fit,
        clamped: outcome.clamped,
        warnings: outcome.warnings,
        loglik: ll,
    })
}

/// Draws a synthetic instance whose truth follows the model family.
#[pyfunction]
#[pyo3(signature = (n_a, n_b, seed=0, lambda_min=-0.5, lambda_max=0.5,
                    missing_rate_a=0.1, missing_rate_b=0.1, min_cell=0.0,
                    population_target=1e5))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    n_a: usize,
    n_b: usize,
    seed: u64,
    lambda_min: f64,
    lambda_max: f64,
    missing_rate_a: f64,
    missing_rate_b: f64,
    min_cell: f64,
    population_target: f64,
) -> PyResult<PySimResult> {
    let dims = Dims::new(n_a, n_b).map_err(to_py_err)?;
    let spec = SimSpec {
        seed,
        lambda_min,
        lambda_max,
        missing_rate_a,
        missing_rate_b,
        min_cell,
        population_target,
        ..SimSpec::new(dims)
    };
    let instance = gen_instance(&spec).map_err(to_py_err)?;
    Ok(PySimResult {
        data: PyObservedData {
            inner: instance.observed,
        },
        truth: PyTable {
            inner: instance.truth,
        },
        attempts: instance.attempts,
    })
}

#[pymodule]
fn dse_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyObservedData>()?;
    m.add_class::<PyTable>()?;
    m.add_class::<PyEmResult>()?;
    m.add_class::<PyFastResult>()?;
    m.add_class::<PySimResult>()?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_em, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_fast, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
