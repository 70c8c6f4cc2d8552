//! Python bindings: study configuration, coupled solves, audits and slope fits.

use std::str::FromStr;

use ::ghostblend::blending::BlendKind;
use ::ghostblend::coupling::Method;
use ::ghostblend::potential::{equilibrium_scale, CauchyBorn, EamParams};
use ::ghostblend::solver::SolverConfig;
use ::ghostblend::study::{self, Benchmark};
use ::ghostblend::{Error, Matrix2};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidInput(_) | Error::Json(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn method(name: &str) -> PyResult<Method> {
    Method::from_str(name).map_err(to_py)
}

fn from_json_str<T: serde::de::DeserializeOwned>(value: &str, what: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown {what} '{value}'")))
}

/// Convergence study settings.
#[pyclass(module = "ghostblend")]
struct StudyConfig {
    inner: study::StudyConfig,
}

#[pymethods]
impl StudyConfig {
    /// Defaults of a benchmark: "divacancy", "microcrack" or "dislocation".
    #[staticmethod]
    fn preset(benchmark: &str) -> PyResult<Self> {
        let b: Benchmark = from_json_str(benchmark, "benchmark")?;
        Ok(Self { inner: study::StudyConfig::preset(b) })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: study::StudyConfig::from_json(text.as_bytes()).map_err(to_py)? })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| to_py(e.into()))
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    #[getter]
    fn benchmark(&self) -> String {
        serde_json::to_value(self.inner.benchmark).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
    }

    #[getter]
    fn sizes(&self) -> Vec<f64> {
        self.inner.sizes.clone()
    }

    /// Replacing the sizes drops any explicit outer radii.
    #[setter]
    fn set_sizes(&mut self, sizes: Vec<f64>) {
        self.inner.sizes = sizes;
        self.inner.outer_radii = None;
    }

    #[getter]
    fn methods(&self) -> Vec<String> {
        self.inner.methods.iter().map(|m| m.to_string()).collect()
    }

    #[setter]
    fn set_methods(&mut self, names: Vec<String>) -> PyResult<()> {
        self.inner.methods = names.iter().map(|n| method(n)).collect::<PyResult<_>>()?;
        Ok(())
    }

    #[getter]
    fn record_wall_time(&self) -> bool {
        self.inner.record_wall_time
    }

    #[setter]
    fn set_record_wall_time(&mut self, on: bool) {
        self.inner.record_wall_time = on;
    }

    fn blend_width(&self, method_name: &str, r_a: f64) -> PyResult<f64> {
        Ok(self.inner.width_rule(method(method_name)?).width(r_a))
    }

    fn outer_radius(&self, index: usize) -> PyResult<f64> {
        if index >= self.inner.sizes.len() {
            return Err(PyValueError::new_err("size index out of range"));
        }
        Ok(self.inner.outer_radius(index))
    }

    fn __repr__(&self) -> String {
        format!("StudyConfig(benchmark={:?}, sizes={:?}, methods={:?})", self.benchmark(), self.sizes(), self.methods())
    }
}

/// One row of a convergence study.
#[pyclass(module = "ghostblend", frozen, get_all)]
struct ErrorReport {
    method: String,
    r_a: f64,
    k_blend: f64,
    dof: usize,
    err_h1: f64,
    err_w1inf: f64,
    err_energy_abs: f64,
    err_energy_rel: f64,
    wall_time_s: f64,
    failure: Option<String>,
}

impl From<&study::ErrorReport> for ErrorReport {
    fn from(r: &study::ErrorReport) -> Self {
        Self {
            method: r.method.to_string(),
            r_a: r.r_a,
            k_blend: r.k_blend,
            dof: r.dof,
            err_h1: r.err_h1,
            err_w1inf: r.err_w1inf,
            err_energy_abs: r.err_energy_abs,
            err_energy_rel: r.err_energy_rel,
            wall_time_s: r.wall_time_s,
            failure: r.failure.clone(),
        }
    }
}

impl ErrorReport {
    fn to_core(&self) -> PyResult<study::ErrorReport> {
        Ok(study::ErrorReport {
            method: method(&self.method)?,
            r_a: self.r_a,
            k_blend: self.k_blend,
            dof: self.dof,
            err_h1: self.err_h1,
            err_w1inf: self.err_w1inf,
            err_energy_abs: self.err_energy_abs,
            err_energy_rel: self.err_energy_rel,
            wall_time_s: self.wall_time_s,
            failure: self.failure.clone(),
        })
    }
}

#[pymethods]
impl ErrorReport {
    fn is_ok(&self) -> bool {
        self.failure.is_none()
    }

    fn __repr__(&self) -> String {
        format!("ErrorReport({} R_a={} DOF={} err_h1={:.4e})", self.method, self.r_a, self.dof, self.err_h1)
    }
}

/// Converged coupled solution on the mesh nodes.
#[pyclass(module = "ghostblend", frozen)]
struct Solution {
    inner: study::Solution,
}

#[pymethods]
impl Solution {
    #[getter]
    fn method(&self) -> String {
        self.inner.method.to_string()
    }

    #[getter]
    fn nodes(&self) -> Vec<[f64; 2]> {
        self.inner.nodes.clone()
    }

    #[getter]
    fn u(&self) -> Vec<[f64; 2]> {
        self.inner.u.clone()
    }

    #[getter]
    fn energy(&self) -> f64 {
        self.inner.energy
    }

    #[getter]
    fn residual(&self) -> f64 {
        self.inner.residual
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    #[getter]
    fn dead_load(&self) -> Option<Vec<[f64; 2]>> {
        self.inner.dead_load.clone()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| to_py(e.into()))
    }
}

fn reports(rows: &[PyRef<'_, ErrorReport>]) -> PyResult<Vec<study::ErrorReport>> {
    rows.iter().map(|r| r.to_core()).collect()
}

/// Runs every (size, method) pair of the configuration.
#[pyfunction]
fn convergence_study(cfg: &StudyConfig) -> PyResult<Vec<ErrorReport>> {
    let rows = study::convergence_study(&cfg.inner).map_err(to_py)?;
    Ok(rows.iter().map(ErrorReport::from).collect())
}

/// Solves the coupled problem at `cfg.sizes[index]`. Point-defect benchmarks only.
#[pyfunction]
#[pyo3(signature = (cfg, method_name, index = 0))]
fn solve(cfg: &StudyConfig, method_name: &str, index: usize) -> PyResult<Solution> {
    let m = method(method_name)?;
    if index >= cfg.inner.sizes.len() {
        return Err(PyValueError::new_err("size index out of range"));
    }
    if cfg.inner.benchmark == Benchmark::Dislocation {
        return Err(PyValueError::new_err("the dislocation benchmark is only available through convergence_study"));
    }
    let setup = cfg.inner.setup(index, m).map_err(to_py)?;
    let solver = SolverConfig { grad_tol: cfg.inner.tolerances.coupled, ..cfg.inner.solver.clone() };
    let (_, sol) = study::solve_single(&setup, m, &solver).map_err(to_py)?;
    Ok(Solution { inner: sol })
}

/// Zero-displacement residuals `(method, K, residual)` on the defect-free lattice.
#[pyfunction]
#[pyo3(signature = (r_a, widths, methods = vec!["BQCE".to_string(), "BQCF".to_string(), "BGFC".to_string()], blend = "spline"))]
fn ghost_audit(r_a: f64, widths: Vec<f64>, methods: Vec<String>, blend: &str) -> PyResult<Vec<(String, f64, f64)>> {
    let ms: Vec<Method> = methods.iter().map(|n| method(n)).collect::<PyResult<_>>()?;
    let blend: BlendKind = from_json_str(blend, "blend")?;
    let rows = study::ghost_audit_sweep(&ms, r_a, &widths, blend).map_err(to_py)?;
    Ok(rows.into_iter().map(|r| (r.method.to_string(), r.k_blend, r.residual)).collect())
}

/// Least-squares log-log slope over the last `last` points.
#[pyfunction]
#[pyo3(signature = (points, last = None))]
fn fit_slope(points: Vec<(f64, f64)>, last: Option<usize>) -> PyResult<f64> {
    study::fit_slope(&points, last).map_err(to_py)
}

/// Per-method slopes `(method, points, h1, w1inf, energy_rel)` of study rows.
#[pyfunction]
#[pyo3(signature = (rows, last = None))]
fn slopes(rows: Vec<PyRef<'_, ErrorReport>>, last: Option<usize>) -> PyResult<Vec<(String, usize, f64, f64, f64)>> {
    let s = study::slopes(&reports(&rows)?, last).map_err(to_py)?;
    Ok(s.into_iter().map(|r| (r.method.to_string(), r.points, r.h1, r.w1inf, r.energy_rel)).collect())
}

/// Study rows as CSV text.
#[pyfunction]
fn to_csv(rows: Vec<PyRef<'_, ErrorReport>>) -> PyResult<String> {
    let mut buf = Vec::new();
    study::write_csv(&reports(&rows)?, &mut buf).map_err(to_py)?;
    String::from_utf8(buf).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pyfunction]
fn read_csv(text: &str) -> PyResult<Vec<ErrorReport>> {
    let rows = study::read_csv(text.as_bytes()).map_err(to_py)?;
    Ok(rows.iter().map(ErrorReport::from).collect())
}

/// Lattice scale `t*` at which the default potential is stress free.
#[pyfunction]
fn equilibrium_lattice_scale() -> PyResult<f64> {
    equilibrium_scale(&EamParams::default()).map_err(to_py)
}

/// Cauchy–Born energy density and its gradient at `F = t* (I + G)`.
#[pyfunction]
fn cauchy_born(g: [[f64; 2]; 2]) -> PyResult<(f64, [[f64; 2]; 2])> {
    let t = equilibrium_scale(&EamParams::default()).map_err(to_py)?;
    let f = (Matrix2::identity() + Matrix2::new(g[0][0], g[0][1], g[1][0], g[1][1])) * t;
    let (w, p) = CauchyBorn::new(EamParams::default()).eval(&f).map_err(to_py)?;
    Ok((w, [[p[(0, 0)], p[(0, 1)]], [p[(1, 0)], p[(1, 1)]]]))
}

#[pymodule]
#[pyo3(name = "ghostblend")]
fn ghostblend_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<StudyConfig>()?;
    m.add_class::<ErrorReport>()?;
    m.add_class::<Solution>()?;
    m.add_function(wrap_pyfunction!(convergence_study, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(ghost_audit, m)?)?;
    m.add_function(wrap_pyfunction!(fit_slope, m)?)?;
    m.add_function(wrap_pyfunction!(slopes, m)?)?;
    m.add_function(wrap_pyfunction!(to_csv, m)?)?;
    m.add_function(wrap_pyfunction!(read_csv, m)?)?;
    m.add_function(wrap_pyfunction!(equilibrium_lattice_scale, m)?)?;
    m.add_function(wrap_pyfunction!(cauchy_born, m)?)?;
    Ok(())
}
