//! Anti-plane screw dislocation: scalar displacements on the triangular
//! lattice with the nearest-neighbour potential
//! `Φ_a = G(Σ_ρ φ(D_ρ y))`, `G(s) = 1 + s²/2`, `φ(r) = sin²(πr)`.
//!
//! Deformations are `y = y_lin + u` with the linear elastic predictor
//! `y_lin(x) = arg(x - x̂) / 2π`, whose branch cut runs along `-e1` from
//! the core `x̂`. Since `φ` has period one, predictor bond differences are
//! reduced into `(-1/2, 1/2]`.

use std::f64::consts::PI;
use std::time::Instant;

use log::info;
use nalgebra::Vector2;

use crate::blending::{Blend, SplineProfile};
use crate::coupling::Method;
use crate::femgrid::{build_graded_mesh, stiffness_triplets, SizeField, TriMesh};
use crate::lattice::{build_lattice, Coord, Lattice, LatticeSpec, Region, HOPS};
use crate::precond::{BoxLaplacian, CholeskyLaplacian, Preconditioner};
use crate::solver::{minimize, Objective, SolveResult, SolverConfig};
use crate::study::{error_energy, report, Comparison, ErrorReport, StudyConfig};
use crate::atomistic::{Displacement, FreeRegion};
use crate::{Error, Result};

/// Barycentre of the lattice triangle `(0,0), (1,0), (0,1)`.
pub fn default_core() -> Vector2<f64> {
    Vector2::new(0.5, 3f64.sqrt() / 6.0)
}

/// `arg(x - core) / 2π` in `(-1/2, 1/2]`.
pub fn ylin(x: &Vector2<f64>, core: &Vector2<f64>) -> Result<f64> {
    let d = x - core;
    if d.norm() < 1e-12 {
        return Err(Error::InvalidInput("the predictor is singular at the core".into()));
    }
    Ok(d.y.atan2(d.x) / (2.0 * PI))
}

/// Gradient of the predictor, `(-(y - ŷ), x - x̂) / (2π |x - x̂|²)`.
pub fn ylin_gradient(x: &Vector2<f64>, core: &Vector2<f64>) -> Vector2<f64> {
    let d = x - core;
    Vector2::new(-d.y, d.x) / (2.0 * PI * d.norm_squared())
}

/// Seven-point rule of degree five on the reference triangle:
/// `(weight, barycentric coordinates)`, weights summing to one.
fn dunavant5() -> [(f64, [f64; 3]); 7] {
    let s15 = 15f64.sqrt();
    let (a1, b1) = ((6.0 - s15) / 21.0, (9.0 + 2.0 * s15) / 21.0);
    let (a2, b2) = ((6.0 + s15) / 21.0, (9.0 - 2.0 * s15) / 21.0);
    let (w1, w2) = ((155.0 - s15) / 1200.0, (155.0 + s15) / 1200.0);
    [
        (9.0 / 40.0, [1.0 / 3.0; 3]),
        (w1, [a1, a1, b1]),
        (w1, [a1, b1, a1]),
        (w1, [b1, a1, a1]),
        (w2, [a2, a2, b2]),
        (w2, [a2, b2, a2]),
        (w2, [b2, a2, a2]),
    ]
}

/// Representative of `d` modulo one in `(-1/2, 1/2]`.
pub fn reduce_period(d: f64) -> f64 {
    let r = d - d.round();
    if r <= -0.5 {
        r + 1.0
    } else {
        r
    }
}

#[inline]
pub fn phi(r: f64) -> f64 {
    let s = (PI * r).sin();
    s * s
}

#[inline]
pub fn dphi(r: f64) -> f64 {
    PI * (2.0 * PI * r).sin()
}

/// Site energy `G(Σ φ(d_j))` of the six bond differences.
pub fn site_energy_ap(d: &[f64; 6]) -> f64 {
    let s: f64 = d.iter().map(|&r| phi(r)).sum();
    1.0 + 0.5 * s * s
}

/// Sum of reduced predictor differences along a closed path of sites.
pub fn burgers_sum(path: &[Vector2<f64>], core: &Vector2<f64>) -> Result<f64> {
    let mut total = 0.0;
    for k in 0..path.len() {
        let a = ylin(&path[k], core)?;
        let b = ylin(&path[(k + 1) % path.len()], core)?;
        total += reduce_period(b - a);
    }
    Ok(total)
}

/// Scalar Cauchy–Born density `W(g) = G(Σ_ρ φ(g·ρ)) / |det A|`.
#[derive(Clone, Debug)]
pub struct ScalarCauchyBorn {
    dirs: [Vector2<f64>; 6],
    cell_area: f64,
}

impl ScalarCauchyBorn {
    pub fn new(lat: &Lattice) -> Self {
        Self { dirs: HOPS.map(|d| lat.to_position(d)), cell_area: lat.cell_area() }
    }

    pub fn energy(&self, g: &Vector2<f64>) -> f64 {
        let s: f64 = self.dirs.iter().map(|r| phi(g.dot(r))).sum();
        (1.0 + 0.5 * s * s) / self.cell_area
    }

    /// `(W(g), ∂W(g))`.
    pub fn eval(&self, g: &Vector2<f64>) -> (f64, Vector2<f64>) {
        let mut s = 0.0;
        let mut ds = Vector2::zeros();
        for r in &self.dirs {
            let t = g.dot(r);
            s += phi(t);
            ds += r * dphi(t);
        }
        ((1.0 + 0.5 * s * s) / self.cell_area, ds * (s / self.cell_area))
    }
}

/// Site data shared by the atomistic and coupled models.
#[derive(Clone, Debug, Default)]
struct Sites {
    index: Vec<usize>,
    nbrs: Vec<[usize; 6]>,
    /// Reduced predictor bond differences.
    dlin: Vec<[f64; 6]>,
    s0: Vec<f64>,
    weight: Vec<f64>,
}

impl Sites {
    fn push(&mut self, lat: &Lattice, a: usize, core: &Vector2<f64>, w: f64) -> Result<()> {
        let ya = ylin(&lat.position(a), core)?;
        let mut nb = [0; 6];
        let mut d = [0.0; 6];
        for (j, h) in HOPS.iter().enumerate() {
            let b = lat.neighbor(a, *h).ok_or_else(|| {
                Error::InvalidInput(format!("site {:?} has a truncated stencil; enlarge the lattice", lat.coord(a)))
            })?;
            nb[j] = b;
            d[j] = reduce_period(ylin(&lat.position(b), core)? - ya);
        }
        let s0: f64 = d.iter().map(|&r| phi(r)).sum();
        self.index.push(a);
        self.nbrs.push(nb);
        self.dlin.push(d);
        self.s0.push(s0);
        self.weight.push(w);
        Ok(())
    }

    /// `Σ w [Φ(y_lin + u) - Φ(y_lin)]` with the gradient added into `grad`.
    fn energy(&self, u: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let mut e = 0.0;
        for k in 0..self.index.len() {
            let a = self.index[k];
            let w = self.weight[k];
            let ua = u[a];
            let mut s = 0.0;
            let mut dd = [0.0; 6];
            for j in 0..6 {
                dd[j] = self.dlin[k][j] + u[self.nbrs[k][j]] - ua;
                s += phi(dd[j]);
            }
            let s0 = self.s0[k];
            e += w * 0.5 * (s - s0) * (s + s0);
            if let Some(g) = grad.as_deref_mut() {
                for j in 0..6 {
                    let c = w * s * dphi(dd[j]);
                    g[self.nbrs[k][j]] += c;
                    g[a] -= c;
                }
            }
        }
        e
    }

    /// Gradient of `Σ w Φ` at vanishing bond differences, applied to `u`.
    fn linear_at_zero(&self, n: usize) -> Vec<f64> {
        let mut g = vec![0.0; n];
        for k in 0..self.index.len() {
            let s: f64 = 6.0 * phi(0.0);
            for j in 0..6 {
                let c = self.weight[k] * s * dphi(0.0);
                g[self.nbrs[k][j]] += c;
                g[self.index[k]] -= c;
            }
        }
        g
    }
}

/// Atomistic anti-plane problem with `u = 0` outside the free region.
#[derive(Clone, Debug)]
pub struct AntiplaneProblem {
    pub lattice: Lattice,
    pub core: Vector2<f64>,
    free: Vec<bool>,
    sites: Sites,
}

impl AntiplaneProblem {
    pub fn new(lattice: Lattice, core: Vector2<f64>, free_region: FreeRegion) -> Result<Self> {
        if !lattice.removed().is_empty() {
            return Err(Error::InvalidInput("the dislocation lattice must be defect-free".into()));
        }
        let free: Vec<bool> = (0..lattice.len()).map(|a| free_region.contains(&lattice, a)).collect();
        let mut sites = Sites::default();
        for a in 0..lattice.len() {
            let near = free[a] || HOPS.iter().any(|h| lattice.neighbor(a, *h).is_some_and(|b| free[b]));
            if near {
                sites.push(&lattice, a, &core, 1.0)?;
            }
        }
        Ok(Self { lattice, core, free, sites })
    }

    pub fn len(&self) -> usize {
        self.lattice.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lattice.is_empty()
    }

    pub fn free_mask(&self) -> &[bool] {
        &self.free
    }

    fn check(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.len() {
            return Err(Error::InvalidInput("displacement length does not match the lattice".into()));
        }
        if u.iter().zip(&self.free).any(|(v, f)| !f && *v != 0.0) {
            return Err(Error::InvalidInput("clamped site has non-zero displacement".into()));
        }
        Ok(())
    }

    pub fn energy(&self, u: &[f64]) -> Result<f64> {
        self.check(u)?;
        Ok(self.sites.energy(u, None))
    }

    pub fn gradient(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check(u)?;
        let mut g = vec![0.0; self.len()];
        self.sites.energy(u, Some(&mut g));
        for (x, f) in g.iter_mut().zip(&self.free) {
            if !f {
                *x = 0.0;
            }
        }
        Ok(g)
    }
}

impl Objective for AntiplaneProblem {
    fn dim(&self) -> usize {
        self.len()
    }

    fn energy_gradient(&self, u: &[f64], grad: &mut [f64]) -> Result<f64> {
        grad.iter_mut().for_each(|x| *x = 0.0);
        let e = self.sites.energy(u, Some(grad));
        for (x, f) in grad.iter_mut().zip(&self.free) {
            if !f {
                *x = 0.0;
            }
        }
        finite(e)
    }

    fn energy(&self, u: &[f64]) -> Result<f64> {
        finite(self.sites.energy(u, None))
    }
}

fn finite(e: f64) -> Result<f64> {
    if e.is_finite() {
        Ok(e)
    } else {
        Err(Error::NonFinite("anti-plane energy".into()))
    }
}

/// Truncated atomistic solution on the parallelogram of `half_width`
/// free layers around the origin.
pub fn solve_reference(half_width: u32, core: Vector2<f64>, cfg: &SolverConfig) -> Result<(AntiplaneProblem, SolveResult)> {
    let lat = build_lattice(&LatticeSpec::new(Region::Parallelogram { half_width: half_width + 2 }, 0))?;
    let prob = AntiplaneProblem::new(lat, core, FreeRegion::Parallelogram(half_width))?;
    let pc = BoxLaplacian::for_lattice(&prob.lattice, half_width, 1)?.scalar();
    let res = minimize(&prob, &vec![0.0; prob.len()], cfg, Some(&pc as &dyn Preconditioner))?;
    if !res.converged {
        return Err(Error::Solver {
            iterations: res.iterations,
            reason: format!("reference stopped at gradient norm {:.3e}", res.grad_norm),
        });
    }
    Ok((prob, res))
}

/// Blended model of the dislocation. The continuum term
/// `W(∇y_lin + ∇u_h) - W(∇y_lin)` is integrated with a degree-five rule:
/// `W` has no stiffness at zero strain, so the far field is soft and a
/// midpoint rule pollutes it with quadrature error that grows with `R_c`.
/// The correction renormalises about vanishing bond differences, where
/// both the site and Cauchy–Born derivatives vanish, so BGFC coincides
/// with BQCE.
#[derive(Clone, Debug)]
pub struct AntiplaneCoupled {
    method: Method,
    lattice: Lattice,
    mesh: TriMesh,
    blend: Blend,
    node_of_site: Vec<Option<usize>>,
    free: Vec<bool>,
    sites: Sites,
    cb: ScalarCauchyBorn,
    /// Per triangle: quadrature weights, predictor gradients and `W` there.
    tri_quad: Vec<[(f64, Vector2<f64>, f64); 7]>,
    dead_load: Vec<f64>,
}

impl AntiplaneCoupled {
    /// Mesh and blend for blending radii `r_a < r_b` and outer radius
    /// `r_c`, graded with `exponent`.
    pub fn build(method: Method, r_a: f64, r_b: f64, r_c: f64, exponent: f64, core: Vector2<f64>) -> Result<Self> {
        if !matches!(method, Method::Bqce | Method::Bgfc) {
            return Err(Error::InvalidInput(format!("{method} is not an energy-based dislocation model")));
        }
        let sf = SizeField { margin: 2.0, ..SizeField::new(r_a, r_b, r_c, exponent)? };
        let outer = sf.outer_layers();
        let lat = build_lattice(&LatticeSpec::new(Region::Hexagon { layers: sf.refined_layers().min(outer) + 1 }, 0))?;
        let mesh = build_graded_mesh(&lat, &sf)?;
        let profile = SplineProfile::new(r_a, r_b)?;
        let nodal = mesh.nodes().iter().map(|x| profile.value((x - core).norm())).collect();
        let blend = Blend::from_nodal(&mesh, &lat, nodal, |a| profile.value((lat.position(a) - core).norm()))?;

        let free: Vec<bool> = mesh.boundary().iter().map(|b| !b).collect();
        let node_of_site: Vec<Option<usize>> = (0..lat.len()).map(|a| mesh.node_at(lat.coord(a))).collect();
        let moving = |a: usize| node_of_site[a].is_some_and(|n| free[n]);
        let mut sites = Sites::default();
        for a in 0..lat.len() {
            let beta = blend.atom_values[a];
            let near = moving(a) || HOPS.iter().any(|h| lat.neighbor(a, *h).is_some_and(moving));
            if beta < 1.0 && near {
                for h in HOPS {
                    let c: Coord = [lat.coord(a)[0] + h[0], lat.coord(a)[1] + h[1]];
                    let off_mesh = crate::lattice::row_distance(lat.defect_row(), c) > outer as i64;
                    if mesh.node_at(c).is_none() && !off_mesh {
                        return Err(Error::Mesh(format!("atomistic site {c:?} is not a mesh node")));
                    }
                }
                sites.push(&lat, a, &core, 1.0 - beta)?;
            }
        }
        let cb = ScalarCauchyBorn::new(&lat);
        let tri_quad = (0..mesh.num_triangles())
            .map(|t| {
                let [a, b, c] = mesh.triangles()[t].map(|n| mesh.nodes()[n]);
                dunavant5().map(|(w, l)| {
                    let g = ylin_gradient(&(a * l[0] + b * l[1] + c * l[2]), &core);
                    (w, g, cb.energy(&g))
                })
            })
            .collect();
        let mut model = Self {
            method,
            lattice: lat,
            mesh,
            blend,
            node_of_site,
            free,
            sites,
            cb,
            tri_quad,
            dead_load: Vec::new(),
        };
        model.dead_load = model.renormalisation_load();
        Ok(model)
    }

    /// `⟨δE(0), ·⟩` at vanishing bond differences and zero gradient.
    fn renormalisation_load(&self) -> Vec<f64> {
        let gs = self.sites.linear_at_zero(self.lattice.len());
        let mut g = vec![0.0; self.mesh.num_nodes()];
        for (a, v) in gs.iter().enumerate() {
            if let Some(n) = self.node_of_site[a] {
                g[n] += v;
            }
        }
        let (_, p0) = self.cb.eval(&Vector2::zeros());
        for t in 0..self.mesh.num_triangles() {
            let w = self.blend.tri_values[t] * self.mesh.areas()[t];
            for (k, &n) in self.mesh.triangles()[t].iter().enumerate() {
                g[n] += w * p0.dot(&self.mesh.basis_gradients(t)[k]);
            }
        }
        for (x, f) in g.iter_mut().zip(&self.free) {
            if !f {
                *x = 0.0;
            }
        }
        g
    }

    pub fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn num_nodes(&self) -> usize {
        self.mesh.num_nodes()
    }

    pub fn dead_load(&self) -> &[f64] {
        &self.dead_load
    }

    fn energy_grad(&self, u: &[f64], mut grad: Option<&mut [f64]>) -> Result<f64> {
        if u.len() != self.mesh.num_nodes() {
            return Err(Error::InvalidInput("nodal field length does not match the mesh".into()));
        }
        let us: Vec<f64> = self.node_of_site.iter().map(|n| n.map_or(0.0, |n| u[n])).collect();
        let mut e;
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
            let mut gs = vec![0.0; self.lattice.len()];
            e = self.sites.energy(&us, Some(&mut gs));
            for (a, v) in gs.iter().enumerate() {
                if let Some(n) = self.node_of_site[a] {
                    g[n] += v;
                }
            }
        } else {
            e = self.sites.energy(&us, None);
        }
        for t in 0..self.mesh.num_triangles() {
            let bt = self.blend.tri_values[t];
            if bt == 0.0 {
                continue;
            }
            let tri = self.mesh.triangles()[t];
            let gl = self.mesh.basis_gradients(t);
            let du: Vector2<f64> = (0..3).map(|k| gl[k] * u[tri[k]]).sum();
            let scale = bt * self.mesh.areas()[t];
            let mut p = Vector2::zeros();
            for (wq, gq, w0) in &self.tri_quad[t] {
                let (w, pq) = self.cb.eval(&(gq + du));
                e += scale * wq * (w - w0);
                p += pq * *wq;
            }
            if let Some(g) = grad.as_deref_mut() {
                for k in 0..3 {
                    g[tri[k]] += scale * p.dot(&gl[k]);
                }
            }
        }
        if self.method == Method::Bgfc {
            e -= self.dead_load.iter().zip(u).map(|(g, x)| g * x).sum::<f64>();
            if let Some(g) = grad.as_deref_mut() {
                for (x, d) in g.iter_mut().zip(&self.dead_load) {
                    *x -= d;
                }
            }
        }
        if let Some(g) = grad {
            for (x, f) in g.iter_mut().zip(&self.free) {
                if !f {
                    *x = 0.0;
                }
            }
        }
        finite(e)
    }

    pub fn energy(&self, u: &[f64]) -> Result<f64> {
        self.energy_grad(u, None)
    }

    pub fn gradient(&self, u: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; u.len()];
        self.energy_grad(u, Some(&mut g))?;
        Ok(g)
    }

    pub fn solve(&self, cfg: &SolverConfig) -> Result<SolveResult> {
        let pc = CholeskyLaplacian::from_triplets(self.mesh.num_nodes(), &stiffness_triplets(&self.mesh), &self.free, 0.0)?
            .scalar();
        minimize(self, &vec![0.0; self.mesh.num_nodes()], cfg, Some(&pc as &dyn Preconditioner))
    }
}

impl Objective for AntiplaneCoupled {
    fn dim(&self) -> usize {
        self.mesh.num_nodes()
    }

    fn energy_gradient(&self, u: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.energy_grad(u, Some(grad))
    }

    fn energy(&self, u: &[f64]) -> Result<f64> {
        self.energy_grad(u, None)
    }
}

fn embed(u: &[f64]) -> Vec<[f64; 2]> {
    u.iter().map(|&x| [x, 0.0]).collect()
}

/// Dislocation convergence study. `ATM` rows are truncated atomistic
/// solves on a parallelogram of `R_c` layers.
pub fn run_dislocation_study(cfg: &StudyConfig) -> Result<Vec<ErrorReport>> {
    cfg.validate()?;
    let core = default_core();
    let h = cfg.reference_half_width();
    let solver = SolverConfig { grad_tol: cfg.tolerances.reference, ..cfg.solver.clone() };
    let t = Instant::now();
    let (reference, ref_res) = solve_reference(h, core, &solver)?;
    info!("dislocation reference: {} sites, {} iterations, {:.1} s", reference.len(), ref_res.iterations, t.elapsed().as_secs_f64());
    let ref_u = Displacement { values: embed(&ref_res.u) };
    let cmp = Comparison::new(&reference.lattice, &ref_u, cfg.comparison_layers())?;
    let coupled_cfg = SolverConfig { grad_tol: cfg.tolerances.coupled, ..cfg.solver.clone() };
    let mut out = Vec::new();
    for idx in 0..cfg.sizes.len() {
        let r_a = cfg.sizes[idx];
        for &method in &cfg.methods {
            let k = cfg.width_rule(method).width(r_a);
            let r_b = r_a + k;
            let r_c = cfg.outer_radius(idx).max(r_b);
            let t = Instant::now();
            let row = (|| -> Result<ErrorReport> {
                if method == Method::Atm {
                    let layers = (r_c - 1e-9).ceil() as u32;
                    let (p, r) = solve_reference(layers, core, &coupled_cfg)?;
                    let (h1, w1) = cmp.errors_lattice(&p.lattice, &Displacement { values: embed(&r.u) })?;
                    let (ea, er) = error_energy(ref_res.energy, r.energy)?;
                    let dof = p.free_mask().iter().filter(|f| **f).count();
                    return Ok(report(method, r_a, k, dof, h1, w1, ea, er));
                }
                let m = AntiplaneCoupled::build(method, r_a, r_b, r_c, cfg.exponent(), core)?;
                let r = m.solve(&coupled_cfg)?;
                if !r.converged {
                    return Err(Error::Solver { iterations: r.iterations, reason: "coupled dislocation solve".into() });
                }
                let (h1, w1) = cmp.errors_mesh(m.mesh(), &embed(&r.u))?;
                let (ea, er) = error_energy(ref_res.energy, r.energy)?;
                Ok(report(method, r_a, k, m.num_nodes(), h1, w1, ea, er))
            })();
            let mut row = row.unwrap_or_else(|e| ErrorReport::failed(method, r_a, k, 0, e.to_string()));
            row.wall_time_s = if cfg.record_wall_time { t.elapsed().as_secs_f64() } else { 0.0 };
            info!("{method} R_a={r_a} DOF={} err_h1={:.4e}", row.dof, row.err_h1);
            out.push(row);
        }
    }
    Ok(out)
}
