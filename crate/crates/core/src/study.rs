//! Error norms, ghost-force audits and convergence studies.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::time::Instant;

use log::{info, warn};
use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use crate::antiplane;
use crate::atomistic::{solve_reference_with, Displacement, FreeRegion, LoadedProblem};
use crate::blending::BlendKind;
use crate::coupling::{CoupledModel, CouplingSetup, Method};
use crate::femgrid::{micro_gradients, micro_triangles, transfer_where, TriMesh};
use crate::lattice::{build_lattice, row_distance, Coord, Lattice, LatticeSpec, Region};
use crate::potential::{equilibrium_scale, EamParams};
use crate::precond::{BoxLaplacian, Preconditioner};
use crate::solver::SolverConfig;
use crate::{Error, Result};

/// Benchmark problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    Divacancy,
    Microcrack,
    Dislocation,
}

impl Benchmark {
    pub fn defect_k(&self) -> usize {
        match self {
            Benchmark::Divacancy => 2,
            Benchmark::Microcrack => 11,
            Benchmark::Dislocation => 0,
        }
    }
}

/// Blending width `K = R_b - R_a` as a function of `R_a`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendWidthRule {
    /// `K = ceil(R_a^(1/3))`.
    Cuberoot,
    /// `K = R_a`.
    Proportional,
}

impl BlendWidthRule {
    pub fn width(&self, r_a: f64) -> f64 {
        match self {
            BlendWidthRule::Cuberoot => (r_a.cbrt() - 1e-12).ceil(),
            BlendWidthRule::Proportional => r_a,
        }
    }
}

/// Homogeneous far-field strain: `B = [[1+s, γ_II], [0, 1+s+γ_I]] F0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Loading {
    pub s: f64,
    pub gamma_i: f64,
    pub gamma_ii: f64,
}

impl Loading {
    pub fn matrix(&self, f0: f64) -> Matrix2<f64> {
        Matrix2::new(1.0 + self.s, self.gamma_ii, 0.0, 1.0 + self.s + self.gamma_i) * f0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// `‖∇E‖_∞` (or force residual) of the coupled solves.
    pub coupled: f64,
    /// `‖∇E‖_∞` of the reference solve.
    pub reference: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { coupled: 1e-8, reference: 1e-8 }
    }
}

/// Configuration of a convergence study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub benchmark: Benchmark,
    pub methods: Vec<Method>,
    pub sizes: Vec<f64>,
    pub blend_width_rule: BlendWidthRule,
    /// Per-method blending-width rules; unlisted methods use
    /// `blend_width_rule`.
    #[serde(default)]
    pub width_overrides: BTreeMap<Method, BlendWidthRule>,
    pub loading: Loading,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default = "default_blend")]
    pub blend: BlendKind,
    /// Mesh grading exponent (defaults to 3/2 for point defects, 1 for the
    /// dislocation).
    #[serde(default)]
    pub exponent: Option<f64>,
    /// Outer radius `R_c` per size (defaults to `ceil(R_a^2 / 2)`).
    #[serde(default)]
    pub outer_radii: Option<Vec<f64>>,
    /// Half width of the reference parallelogram (defaults to `2 max R_c`).
    #[serde(default)]
    pub reference_half_width: Option<u32>,
    /// Hop layers of the comparison hexagon (defaults to `max R_c`).
    #[serde(default)]
    pub comparison_layers: Option<u32>,
    /// Record solve times; off gives byte-identical reruns.
    #[serde(default = "default_true")]
    pub record_wall_time: bool,
    #[serde(default)]
    pub solver: SolverConfig,
}

fn default_blend() -> BlendKind {
    BlendKind::Spline
}

fn default_true() -> bool {
    true
}

impl StudyConfig {
    /// Benchmark defaults.
    pub fn preset(benchmark: Benchmark) -> Self {
        let (methods, sizes, rule, loading) = match benchmark {
            Benchmark::Divacancy => (
                vec![Method::Bqce, Method::Bqcf, Method::Bgfc],
                vec![4.0, 8.0, 16.0, 32.0],
                BlendWidthRule::Cuberoot,
                Loading { s: 0.03, gamma_i: 0.0, gamma_ii: 0.03 },
            ),
            Benchmark::Microcrack => (
                vec![Method::Bqce, Method::Bqcf, Method::Bgfc],
                vec![8.0, 16.0, 32.0],
                BlendWidthRule::Cuberoot,
                Loading { s: 0.0, gamma_i: 0.03, gamma_ii: 0.03 },
            ),
            Benchmark::Dislocation => (
                vec![Method::Bgfc],
                vec![4.0, 8.0, 16.0],
                BlendWidthRule::Proportional,
                Loading { s: 0.0, gamma_i: 0.0, gamma_ii: 0.0 },
            ),
        };
        Self {
            benchmark,
            methods,
            sizes,
            blend_width_rule: rule,
            // BQCE is run at its own quasi-optimal width
            width_overrides: match benchmark {
                Benchmark::Dislocation => BTreeMap::new(),
                _ => BTreeMap::from([(Method::Bqce, BlendWidthRule::Proportional)]),
            },
            loading,
            // the dislocation errors reach 1e-7, below what 1e-8 resolves
            tolerances: match benchmark {
                Benchmark::Dislocation => Tolerances { coupled: 1e-11, reference: 1e-11 },
                _ => Tolerances::default(),
            },
            blend: BlendKind::Spline,
            exponent: None,
            outer_radii: None,
            reference_half_width: None,
            comparison_layers: None,
            record_wall_time: true,
            solver: SolverConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.methods.is_empty() {
            return Err(Error::InvalidInput("a study needs at least one size and one method".into()));
        }
        if self.sizes.iter().any(|r| !(*r >= 1.0) || !r.is_finite()) {
            return Err(Error::InvalidInput("sizes must be finite and at least 1".into()));
        }
        if self.sizes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("sizes must be strictly increasing".into()));
        }
        if let Some(rc) = &self.outer_radii {
            if rc.len() != self.sizes.len() {
                return Err(Error::InvalidInput("outer_radii must have one entry per size".into()));
            }
        }
        if !(self.tolerances.coupled > 0.0 && self.tolerances.reference > 0.0) {
            return Err(Error::InvalidInput("tolerances must be positive".into()));
        }
        if self.benchmark == Benchmark::Dislocation && self.methods.contains(&Method::Bqcf) {
            return Err(Error::InvalidInput("the dislocation benchmark supports ATM, BQCE and BGFC".into()));
        }
        Ok(())
    }

    pub fn exponent(&self) -> f64 {
        self.exponent.unwrap_or(match self.benchmark {
            Benchmark::Dislocation => 1.0,
            _ => 1.5,
        })
    }

    pub fn outer_radius(&self, idx: usize) -> f64 {
        match &self.outer_radii {
            Some(rc) => rc[idx],
            None => (self.sizes[idx] * self.sizes[idx] / 2.0).ceil(),
        }
    }

    pub fn max_outer_layers(&self) -> u32 {
        (0..self.sizes.len()).map(|i| (self.outer_radius(i) - 1e-9).ceil() as u32).max().unwrap_or(1)
    }

    pub fn reference_half_width(&self) -> u32 {
        self.reference_half_width.unwrap_or(2 * self.max_outer_layers())
    }

    pub fn comparison_layers(&self) -> u32 {
        self.comparison_layers.unwrap_or(self.max_outer_layers())
    }

    pub fn width_rule(&self, method: Method) -> BlendWidthRule {
        self.width_overrides.get(&method).copied().unwrap_or(self.blend_width_rule)
    }

    /// Coupled setup of `method` for size index `idx`.
    pub fn setup(&self, idx: usize, method: Method) -> Result<CouplingSetup> {
        let params = EamParams::default();
        let f0 = equilibrium_scale(&params)?;
        let r_a = self.sizes[idx];
        let r_b = r_a + self.width_rule(method).width(r_a);
        Ok(CouplingSetup {
            defect_k: self.benchmark.defect_k(),
            r_a,
            r_b,
            // two layers of continuum keep the blended stencils inside the lattice
            r_c: self.outer_radius(idx).max(r_b + 2.0),
            exponent: self.exponent(),
            blend: self.blend,
            params,
            loading: self.loading.matrix(f0),
        })
    }

    pub fn from_json<R: Read>(r: R) -> Result<Self> {
        let cfg: Self = serde_json::from_reader(r)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One row of a study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub method: Method,
    pub r_a: f64,
    pub k_blend: f64,
    pub dof: usize,
    pub err_h1: f64,
    pub err_w1inf: f64,
    pub err_energy_abs: f64,
    pub err_energy_rel: f64,
    pub wall_time_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl ErrorReport {
    pub fn failed(method: Method, r_a: f64, k_blend: f64, dof: usize, reason: String) -> Self {
        Self {
            method,
            r_a,
            k_blend,
            dof,
            err_h1: f64::NAN,
            err_w1inf: f64::NAN,
            err_energy_abs: f64::NAN,
            err_energy_rel: f64::NAN,
            wall_time_s: 0.0,
            failure: Some(reason),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    method: String,
    #[serde(rename = "R_a")]
    r_a: f64,
    #[serde(rename = "K_blend")]
    k_blend: f64,
    #[serde(rename = "DOF")]
    dof: usize,
    err_h1: f64,
    err_w1inf: f64,
    err_energy_abs: f64,
    err_energy_rel: f64,
    wall_time_s: f64,
}

pub const CSV_HEADER: &str = "method,R_a,K_blend,DOF,err_h1,err_w1inf,err_energy_abs,err_energy_rel,wall_time_s";

pub fn write_csv<W: Write>(reports: &[ErrorReport], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in reports {
        wr.serialize(CsvRow {
            method: r.method.as_str().to_string(),
            r_a: r.r_a,
            k_blend: r.k_blend,
            dof: r.dof,
            err_h1: r.err_h1,
            err_w1inf: r.err_w1inf,
            err_energy_abs: r.err_energy_abs,
            err_energy_rel: r.err_energy_rel,
            wall_time_s: r.wall_time_s,
        })
        .map_err(csv_err)?;
    }
    if reports.is_empty() {
        wr.write_record(CSV_HEADER.split(',')).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<ErrorReport>> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::InvalidInput(format!("unexpected CSV header {:?}", header.join(","))));
    }
    rd.deserialize::<CsvRow>()
        .map(|row| {
            let row = row.map_err(csv_err)?;
            let failed = !row.err_h1.is_finite();
            Ok(ErrorReport {
                method: row.method.parse()?,
                r_a: row.r_a,
                k_blend: row.k_blend,
                dof: row.dof,
                err_h1: row.err_h1,
                err_w1inf: row.err_w1inf,
                err_energy_abs: row.err_energy_abs,
                err_energy_rel: row.err_energy_rel,
                wall_time_s: row.wall_time_s,
                failure: failed.then(|| "failed".to_string()),
            })
        })
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(format!("CSV: {e}"))
}

/// `(|E_ref - E_h|, |E_ref - E_h| / max(|E_ref|, 1e-30))`.
pub fn error_energy(e_ref: f64, e_h: f64) -> Result<(f64, f64)> {
    if !e_ref.is_finite() || !e_h.is_finite() {
        return Err(Error::NonFinite("energy".into()));
    }
    let abs = (e_ref - e_h).abs();
    Ok((abs, abs / e_ref.abs().max(1e-30)))
}

/// Least-squares slope of `log err` against `log DOF` over the last `last`
/// points (all when `None`).
pub fn fit_slope(points: &[(f64, f64)], last: Option<usize>) -> Result<f64> {
    let m = last.unwrap_or(points.len());
    if m < 2 || m > points.len() {
        return Err(Error::InvalidInput(format!("cannot fit {m} of {} points", points.len())));
    }
    let pts = &points[points.len() - m..];
    if pts.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0) || !x.is_finite() || !y.is_finite()) {
        return Err(Error::InvalidInput("slope fit needs positive finite values".into()));
    }
    let n = m as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = pts.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    if !(sxx > 0.0) {
        return Err(Error::InvalidInput("slope fit needs distinct DOF values".into()));
    }
    Ok(sxy / sxx)
}

/// Reference gradients on the micro-triangulation of a comparison region.
pub struct Comparison<'a> {
    lattice: &'a Lattice,
    layers: i64,
    triangles: Vec<[usize; 3]>,
    reference: Vec<Matrix2<f64>>,
    triangle_area: f64,
}

impl<'a> Comparison<'a> {
    /// Sites within `layers` hops of the defect row of `lattice`.
    pub fn new(lattice: &'a Lattice, reference: &Displacement, layers: u32) -> Result<Self> {
        if reference.len() != lattice.len() {
            return Err(Error::InvalidInput("reference does not match its lattice".into()));
        }
        let l = layers as i64;
        let row = lattice.defect_row();
        let outside: Vec<Coord> = [[row[1] + l + 1, 0], [row[0] - l - 1, 0], [row[0], l + 1], [row[0], -l - 1]].into();
        if outside.iter().any(|c| lattice.index_of(*c).is_none()) {
            return Err(Error::InvalidInput(format!("comparison region of {layers} layers exceeds the reference lattice")));
        }
        let triangles = micro_triangles(lattice, |c| row_distance(row, c) <= l);
        let reference = micro_gradients(lattice, &triangles, &reference.values);
        Ok(Self { lattice, layers: l, triangles, reference, triangle_area: 0.5 * lattice.cell_area() })
    }

    pub fn lattice(&self) -> &Lattice {
        self.lattice
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn contains(&self, c: Coord) -> bool {
        row_distance(self.lattice.defect_row(), c) <= self.layers
    }

    /// `(‖∇ū_ref - ∇ū‖_{L²}, max |∇ū_ref - ∇ū|)` for a field on the
    /// reference sites.
    pub fn errors_sites(&self, u: &[[f64; 2]]) -> Result<(f64, f64)> {
        if u.len() != self.lattice.len() {
            return Err(Error::InvalidInput("field does not match the reference lattice".into()));
        }
        let g = micro_gradients(self.lattice, &self.triangles, u);
        let mut sum = 0.0;
        let mut max = 0.0f64;
        for (a, b) in g.iter().zip(&self.reference) {
            let d = (a - b).norm_squared();
            sum += d;
            max = max.max(d);
        }
        Ok(((sum * self.triangle_area).sqrt(), max.sqrt()))
    }

    /// Errors of a P1 field, evaluated at the reference sites.
    pub fn errors_mesh(&self, mesh: &TriMesh, u_h: &[[f64; 2]]) -> Result<(f64, f64)> {
        let row = self.lattice.defect_row();
        let l = self.layers;
        let u = transfer_where(mesh, u_h, self.lattice, |c| row_distance(row, c) <= l)?;
        self.errors_sites(&u.values)
    }

    /// Errors of a lattice field on another lattice sharing coordinates
    /// (zero off that lattice).
    pub fn errors_lattice(&self, lat: &Lattice, u: &Displacement) -> Result<(f64, f64)> {
        let mut v = vec![[0.0; 2]; self.lattice.len()];
        for a in 0..self.lattice.len() {
            let c = self.lattice.coord(a);
            if self.contains(c) {
                if let Some(b) = lat.index_of(c) {
                    v[a] = u.values[b];
                }
            }
        }
        self.errors_sites(&v)
    }
}

/// `max |residual|` at `u = 0`.
pub fn ghost_audit(model: &CoupledModel) -> Result<f64> {
    let z = vec![[0.0; 2]; model.num_nodes()];
    let r = model.residual(&z)?;
    Ok(r.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs())))
}

/// One row of a ghost-force audit sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub method: Method,
    pub k_blend: f64,
    pub residual: f64,
}

/// Ghost-force audit on the defect-free lattice at the equilibrium
/// loading, over blending widths.
pub fn ghost_audit_sweep(methods: &[Method], r_a: f64, widths: &[f64], blend: BlendKind) -> Result<Vec<AuditRow>> {
    let params = EamParams::default();
    let f0 = equilibrium_scale(&params)?;
    let mut out = Vec::new();
    for &k in widths {
        let r_b = r_a + k;
        let setup = CouplingSetup {
            defect_k: 0,
            r_a,
            r_b,
            r_c: (2.0 * r_b + 8.0).ceil(),
            exponent: 1.5,
            blend,
            params,
            loading: Matrix2::identity() * f0,
        };
        for &method in methods {
            let m = setup.build(method)?;
            out.push(AuditRow { method, k_blend: k, residual: ghost_audit(&m)? });
        }
    }
    Ok(out)
}

/// Truncated atomistic solution on a parallelogram.
pub struct Reference {
    pub problem: LoadedProblem,
    pub u: Displacement,
    pub energy: f64,
    pub iterations: usize,
}

/// Solves the atomistic problem on the parallelogram with `half_width`
/// free layers.
pub fn solve_parallelogram(
    defect_k: usize,
    half_width: u32,
    loading: Matrix2<f64>,
    tol: f64,
    cfg: &SolverConfig,
) -> Result<Reference> {
    let lat = build_lattice(&LatticeSpec::new(Region::Parallelogram { half_width: half_width + 4 }, defect_k))?;
    let problem = LoadedProblem::new(lat, EamParams::default(), loading, FreeRegion::Parallelogram(half_width))?;
    let pc = BoxLaplacian::for_lattice(&problem.lattice, half_width, 1)?;
    let (u, res) = solve_reference_with(&problem, tol, Some(&pc as &dyn Preconditioner), cfg)?;
    Ok(Reference { problem, u, energy: res.energy, iterations: res.iterations })
}

/// Point-defect convergence study: one shared reference, then every
/// method at every size. A failing row is recorded, not fatal.
pub fn convergence_study(cfg: &StudyConfig) -> Result<Vec<ErrorReport>> {
    cfg.validate()?;
    if cfg.benchmark == Benchmark::Dislocation {
        return antiplane::run_dislocation_study(cfg);
    }
    let params = EamParams::default();
    let loading = cfg.loading.matrix(equilibrium_scale(&params)?);
    let h = cfg.reference_half_width();
    let t = Instant::now();
    let reference = solve_parallelogram(cfg.benchmark.defect_k(), h, loading, cfg.tolerances.reference, &cfg.solver)?;
    info!(
        "reference: {} sites, {} iterations, {:.1} s",
        reference.problem.len(),
        reference.iterations,
        t.elapsed().as_secs_f64()
    );
    let cmp = Comparison::new(&reference.problem.lattice, &reference.u, cfg.comparison_layers())?;
    let solver = SolverConfig { grad_tol: cfg.tolerances.coupled, ..cfg.solver.clone() };
    let mut out = Vec::new();
    for idx in 0..cfg.sizes.len() {
        for &method in &cfg.methods {
            let setup = cfg.setup(idx, method)?;
            let k = setup.r_b - setup.r_a;
            let t = Instant::now();
            let row = run_row(&setup, method, &solver, cfg.tolerances.coupled, &cmp, reference.energy);
            let mut row = row.unwrap_or_else(|e| {
                warn!("{method} at R_a = {}: {e}", setup.r_a);
                ErrorReport::failed(method, setup.r_a, k, 0, e.to_string())
            });
            row.wall_time_s = if cfg.record_wall_time { t.elapsed().as_secs_f64() } else { 0.0 };
            info!("{method} R_a={} DOF={} err_h1={:.4e}", row.r_a, row.dof, row.err_h1);
            out.push(row);
        }
    }
    Ok(out)
}

fn run_row(
    setup: &CouplingSetup,
    method: Method,
    solver: &SolverConfig,
    tol: f64,
    cmp: &Comparison,
    e_ref: f64,
) -> Result<ErrorReport> {
    let k = setup.r_b - setup.r_a;
    if method == Method::Atm {
        let layers = (setup.r_c - 1e-9).ceil() as u32;
        let r = solve_parallelogram(setup.defect_k, layers, setup.loading, tol, solver)?;
        let (h1, w1) = cmp.errors_lattice(&r.problem.lattice, &r.u)?;
        let (ea, er) = error_energy(e_ref, r.energy)?;
        let dof = r.problem.free_mask().iter().filter(|f| **f).count();
        return Ok(report(method, setup.r_a, k, dof, h1, w1, ea, er));
    }
    let model = setup.build(method)?;
    let res = model.solve(solver)?;
    if !res.converged {
        return Err(Error::Solver {
            iterations: res.iterations,
            reason: format!("residual {:.3e} above tolerance", res.grad_norm),
        });
    }
    let u = Displacement::from_flat(&res.u);
    let (h1, w1) = cmp.errors_mesh(model.mesh(), &u.values)?;
    let (ea, er) = error_energy(e_ref, res.energy)?;
    Ok(report(method, setup.r_a, k, model.num_nodes(), h1, w1, ea, er))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn report(method: Method, r_a: f64, k: f64, dof: usize, h1: f64, w1: f64, ea: f64, er: f64) -> ErrorReport {
    ErrorReport {
        method,
        r_a,
        k_blend: k,
        dof,
        err_h1: h1,
        err_w1inf: w1,
        err_energy_abs: ea,
        err_energy_rel: er,
        wall_time_s: 0.0,
        failure: None,
    }
}

/// Per-method slopes of the error columns against DOF.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeRow {
    pub method: Method,
    pub points: usize,
    pub h1: f64,
    pub w1inf: f64,
    pub energy_rel: f64,
}

pub fn slopes(reports: &[ErrorReport], last: Option<usize>) -> Result<Vec<SlopeRow>> {
    let mut methods: Vec<Method> = Vec::new();
    for r in reports {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    methods
        .into_iter()
        .map(|m| {
            let rows: Vec<&ErrorReport> = reports.iter().filter(|r| r.method == m && r.is_ok()).collect();
            let fit = |f: fn(&ErrorReport) -> f64| {
                let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.dof as f64, f(r))).collect();
                fit_slope(&pts, last)
            };
            Ok(SlopeRow {
                method: m,
                points: last.unwrap_or(rows.len()),
                h1: fit(|r| r.err_h1)?,
                w1inf: fit(|r| r.err_w1inf)?,
                energy_rel: fit(|r| r.err_energy_rel)?,
            })
        })
        .collect()
}

/// Serializable single solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub method: Method,
    pub setup: CouplingSetup,
    pub nodes: Vec<[f64; 2]>,
    pub u: Vec<[f64; 2]>,
    pub energy: f64,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dead_load: Option<Vec<[f64; 2]>>,
}

/// Builds and solves one coupled model.
pub fn solve_single(setup: &CouplingSetup, method: Method, solver: &SolverConfig) -> Result<(CoupledModel, Solution)> {
    let model = setup.build(method)?;
    let res = model.solve(solver)?;
    let sol = Solution {
        method,
        setup: setup.clone(),
        nodes: model.mesh().nodes().iter().map(|x| [x.x, x.y]).collect(),
        u: Displacement::from_flat(&res.u).values,
        energy: res.energy,
        residual: res.grad_norm,
        iterations: res.iterations,
        converged: res.converged,
        dead_load: model.dead_load().map(|d| d.g.clone()),
    };
    Ok((model, sol))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_laws() {
        let pts: Vec<(f64, f64)> = [10.0, 100.0, 1000.0, 5000.0].iter().map(|&d| (d, 1.0 / d)).collect();
        assert!((fit_slope(&pts, None).unwrap() + 1.0).abs() < 1e-12);
        let pts: Vec<(f64, f64)> = [10.0, 100.0, 1000.0].iter().map(|&d: &f64| (d, 3.0 * d.powf(-0.5))).collect();
        assert!((fit_slope(&pts, None).unwrap() + 0.5).abs() < 1e-12);
        let mixed = [(1.0, 5.0), (10.0, 7.0), (100.0, 0.7), (1000.0, 0.07)];
        assert!((fit_slope(&mixed, Some(2)).unwrap() + 1.0).abs() < 1e-12);
        assert!(fit_slope(&[(1.0, 1.0), (2.0, 0.0)], None).is_err());
        assert!(fit_slope(&[(1.0, 1.0)], None).is_err());
    }

    #[test]
    fn energy_errors() {
        assert_eq!(error_energy(-2.0, -1.0).unwrap(), (1.0, 0.5));
        assert_eq!(error_energy(3.0, 3.0).unwrap(), (0.0, 0.0));
        assert!(error_energy(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn blend_width_rules() {
        assert_eq!(BlendWidthRule::Cuberoot.width(4.0), 2.0);
        assert_eq!(BlendWidthRule::Cuberoot.width(8.0), 2.0);
        assert_eq!(BlendWidthRule::Cuberoot.width(27.0), 3.0);
        assert_eq!(BlendWidthRule::Cuberoot.width(32.0), 4.0);
        assert_eq!(BlendWidthRule::Proportional.width(16.0), 16.0);
    }

    #[test]
    fn loading_matrices() {
        let d = Loading { s: 0.03, gamma_i: 0.0, gamma_ii: 0.03 }.matrix(1.0);
        assert_eq!(d, Matrix2::new(1.03, 0.03, 0.0, 1.03));
        let m = Loading { s: 0.0, gamma_i: 0.03, gamma_ii: 0.03 }.matrix(2.0);
        assert_eq!(m, Matrix2::new(2.0, 0.06, 0.0, 2.06));
    }

    #[test]
    fn config_validation_and_json() {
        let mut c = StudyConfig::preset(Benchmark::Divacancy);
        c.validate().unwrap();
        let j = serde_json::to_string(&c).unwrap();
        assert_eq!(StudyConfig::from_json(j.as_bytes()).unwrap(), c);
        let minimal = r#"{"benchmark":"microcrack","methods":["BQCE","BGFC"],"sizes":[4,8],
            "blend_width_rule":"cuberoot","loading":{"s":0,"gamma_i":0.03,"gamma_ii":0.03}}"#;
        let m = StudyConfig::from_json(minimal.as_bytes()).unwrap();
        assert_eq!(m.exponent(), 1.5);
        assert_eq!(m.outer_radius(1), 32.0);
        assert_eq!(m.reference_half_width(), 64);
        c.sizes = vec![8.0, 4.0];
        assert!(c.validate().is_err());
        c.sizes = vec![];
        assert!(c.validate().is_err());
    }

    #[test]
    fn csv_round_trip_and_header() {
        let rows = vec![
            report(Method::Bgfc, 4.0, 2.0, 100, 0.1, 0.2, 0.3, 0.4),
            ErrorReport::failed(Method::Bqcf, 8.0, 2.0, 0, "diverged".into()),
        ];
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        let back = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back[0], rows[0]);
        assert!(!back[1].is_ok());
        let mut empty = Vec::new();
        write_csv(&[], &mut empty).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap().trim(), CSV_HEADER);
        assert!(read_csv("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn comparison_of_affine_field() {
        let lat = build_lattice(&LatticeSpec::new(Region::Parallelogram { half_width: 12 }, 0)).unwrap();
        let zero = Displacement::zeros(lat.len());
        let cmp = Comparison::new(&lat, &zero, 6).unwrap();
        let g = Matrix2::new(0.1, -0.2, 0.05, 0.3);
        let u: Vec<[f64; 2]> = (0..lat.len())
            .map(|a| {
                let v = g * lat.position(a);
                [v.x, v.y]
            })
            .collect();
        let (h1, w1) = cmp.errors_sites(&u).unwrap();
        let area = cmp.num_triangles() as f64 * 0.5 * lat.cell_area();
        assert!((h1 - g.norm() * area.sqrt()).abs() < 1e-12);
        assert!((w1 - g.norm()).abs() < 1e-12);
        let (z1, z2) = cmp.errors_sites(&zero.values).unwrap();
        assert_eq!((z1, z2), (0.0, 0.0));
        assert!(Comparison::new(&lat, &zero, 12).is_err());
    }
}
