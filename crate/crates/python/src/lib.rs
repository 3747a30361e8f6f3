//! Python bindings: run configs, compute bounds and a few numerical helpers.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use sgn_lab::cli::{self, CommonArgs};
use sgn_lab::gls::{self, Covariance};
use sgn_lab::graph::{self, Topology};

fn to_py(e: sgn_lab::Error) -> PyErr {
    match e.exit_code() {
        1 | 2 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn args(config: PathBuf, out: PathBuf, seed: Option<u64>, trials: Option<u64>, workers: usize) -> CommonArgs {
    CommonArgs {
        config,
        data: None,
        seed,
        trials,
        workers,
        out: Some(out),
        sweep: None,
        beta_convention: None,
    }
}

/// Runs a config and returns the top-level summary as JSON.
#[pyfunction]
#[pyo3(signature = (config, out, seed=None, trials=None, workers=1))]
fn run(py: Python<'_>, config: PathBuf, out: PathBuf, seed: Option<u64>, trials: Option<u64>, workers: usize) -> PyResult<String> {
    let a = args(config, out, seed, trials, workers);
    let summary = py.detach(|| cli::resolve(&a).and_then(|r| cli::run_experiment(&r))).map_err(to_py)?;
    serde_json::to_string(&summary).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Writes `bounds.json` (and `bound_check.json` with `check`) under `out`.
#[pyfunction]
#[pyo3(signature = (config, out, seed=None, check=false))]
fn bounds(py: Python<'_>, config: PathBuf, out: PathBuf, seed: Option<u64>, check: bool) -> PyResult<()> {
    let a = args(config, out, seed, None, 1);
    py.detach(|| cli::resolve(&a).and_then(|r| cli::cmd_bounds(&r, check))).map_err(to_py)
}

/// Second-smallest eigenvalue of the (generalized, if `alpha_hat` is given) Laplacian.
#[pyfunction]
#[pyo3(signature = (n, edges, alpha_hat=None))]
fn algebraic_connectivity(n: usize, edges: Vec<(usize, usize)>, alpha_hat: Option<Vec<f64>>) -> PyResult<f64> {
    let t = Topology::new(n, edges).map_err(to_py)?;
    let l = match alpha_hat {
        Some(a) if a.len() == n => graph::generalized_laplacian(&t, &a),
        Some(a) => return Err(PyValueError::new_err(format!("alpha_hat has {} entries for {n} nodes", a.len()))),
        None => graph::laplacian(&t),
    };
    graph::algebraic_connectivity(&l).map_err(to_py)
}

/// GLS estimate for a diagonal noise covariance.
#[pyfunction]
fn gls_solve(x: Vec<Vec<f64>>, omega_diag: Vec<f64>, y: Vec<f64>) -> PyResult<Vec<f64>> {
    let rows = x.len();
    let cols = x.first().map_or(0, Vec::len);
    if x.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows of x differ in length"));
    }
    let xm = DMatrix::from_row_iterator(rows, cols, x.into_iter().flatten());
    let sol = gls::gls_solve(&xm, &Covariance::Diagonal(DVector::from_vec(omega_diag)), &DVector::from_vec(y)).map_err(to_py)?;
    Ok(sol.w_hat.iter().copied().collect())
}

#[pymodule]
fn sgn_lab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(bounds, m)?)?;
    m.add_function(wrap_pyfunction!(algebraic_connectivity, m)?)?;
    m.add_function(wrap_pyfunction!(gls_solve, m)?)?;
    Ok(())
}
