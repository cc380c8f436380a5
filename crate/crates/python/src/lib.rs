//! Python bindings: cost accounting, ladders, slope fits and Pareto frontiers.

use std::collections::BTreeMap;

use archscale::analysis::{self, ParetoPoint, Transform};
use archscale::config::Family;
use archscale::ladders::{desk_ladder, named_config, standard_ladder};
use archscale::{cost, model, Error};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn family(name: &str) -> PyResult<Family> {
    name.parse().map_err(py_err)
}

/// Total and per-component parameter counts.
#[pyfunction]
pub fn count_params(family_name: &str, size: &str) -> PyResult<(u64, BTreeMap<String, u64>)> {
    let c = named_config(family(family_name)?, size).map_err(py_err)?;
    let r = cost::count_params(&c).map_err(py_err)?;
    Ok((r.params_total, r.params_by_component))
}

/// Forward multiply-add FLOPs at the given sequence lengths.
#[pyfunction]
#[pyo3(signature = (family_name, size, n_enc=cost::DEFAULT_SEQ_LEN, n_dec=cost::DEFAULT_SEQ_LEN))]
pub fn count_flops(family_name: &str, size: &str, n_enc: usize, n_dec: usize) -> PyResult<(u64, BTreeMap<String, u64>)> {
    let c = named_config(family(family_name)?, size).map_err(py_err)?;
    let r = cost::count_flops(&c, n_enc, n_dec).map_err(py_err)?;
    Ok((r.flops_forward, r.flops_by_component))
}

/// `(label, params)` for each rung of a family's ladder.
#[pyfunction]
#[pyo3(signature = (family_name, desk=false))]
pub fn ladder(family_name: &str, desk: bool) -> PyResult<Vec<(String, u64)>> {
    let f = family(family_name)?;
    let entries = if desk { desk_ladder(f) } else { standard_ladder(f) }.map_err(py_err)?;
    entries
        .into_iter()
        .map(|e| Ok((e.label, cost::count_params(&e.config).map_err(py_err)?.params_total)))
        .collect()
}

/// Ordinary least squares of `ys` on `log10(xs)` (or `xs` when `log_x` is false).
#[pyfunction]
#[pyo3(signature = (xs, ys, log_x=true))]
pub fn fit_slope<'py>(py: Python<'py>, xs: Vec<f64>, ys: Vec<f64>, log_x: bool) -> PyResult<Bound<'py, PyDict>> {
    if xs.len() != ys.len() {
        return Err(PyValueError::new_err(format!("{} xs vs {} ys", xs.len(), ys.len())));
    }
    let points: Vec<(f64, f64)> = xs.into_iter().zip(ys).collect();
    let t = if log_x { Transform::Log10 } else { Transform::Identity };
    let fit = analysis::fit_slope(&points, t).map_err(py_err)?;
    let d = PyDict::new_bound(py);
    d.set_item("alpha", fit.alpha)?;
    d.set_item("intercept", fit.intercept)?;
    d.set_item("r_squared", fit.r_squared)?;
    d.set_item("n_points", fit.n_points)?;
    Ok(d)
}

/// Non-dominated `(run_id, cost, quality)` triples, sorted by cost.
#[pyfunction]
pub fn pareto_frontier(points: Vec<(String, f64, f64)>) -> Vec<(String, f64, f64)> {
    let pts: Vec<ParetoPoint> = points.into_iter().map(|(run_id, cost, quality)| ParetoPoint { run_id, cost, quality }).collect();
    analysis::pareto_frontier(&pts).into_iter().map(|p| (p.run_id, p.cost, p.quality)).collect()
}

/// Per-family slopes of the bundled published results, keyed by column name.
#[pyfunction]
pub fn published_slopes() -> BTreeMap<String, BTreeMap<String, f64>> {
    analysis::slope_table(&analysis::shipped_table())
        .into_iter()
        .map(|row| {
            let fits = row.fits.iter().map(|(pair, f)| (pair.column().to_string(), f.alpha)).collect();
            (row.family.name().to_string(), fits)
        })
        .collect()
}

/// Finite-difference gradient check on the small configuration; returns `(passed, max_rel_err)`.
#[pyfunction]
#[pyo3(signature = (family_name, seed=0))]
pub fn gradcheck(family_name: &str, seed: u64) -> PyResult<(bool, f64)> {
    let c = model::tiny_config(family(family_name)?);
    let opts = model::GradcheckOptions { seed, ..Default::default() };
    let r = model::gradcheck(&c, &opts).map_err(py_err)?;
    Ok((r.passed, r.max_rel_err))
}

#[pymodule]
fn archscale_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(count_params, m)?)?;
    m.add_function(wrap_pyfunction!(count_flops, m)?)?;
    m.add_function(wrap_pyfunction!(ladder, m)?)?;
    m.add_function(wrap_pyfunction!(fit_slope, m)?)?;
    m.add_function(wrap_pyfunction!(pareto_frontier, m)?)?;
    m.add_function(wrap_pyfunction!(published_slopes, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add("FAMILIES", Family::ALL.iter().map(|f| f.name()).collect::<Vec<_>>())?;
    Ok(())
}
