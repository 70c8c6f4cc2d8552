//! Blended atomistic/continuum models on a graded mesh.
//!
//! All fields are nodal displacements relative to the predictor `B x`;
//! covectors are stored with gradient sign. Nodes on the outer ring and
//! nodes sitting on vacancies are clamped.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::atomistic::SiteAssembler;
use crate::blending::{optimize_beta, spline_beta, Blend, BlendKind};
use crate::femgrid::{build_graded_mesh, stiffness_triplets, SizeField, TriMesh};
use crate::lattice::{build_lattice, Lattice, LatticeSpec, Region};
use crate::potential::{CauchyBorn, EamParams};
use crate::precond::{CholeskyLaplacian, Preconditioner};
use crate::solver::{force_balance, minimize, Objective, Residual, SolveResult, SolverConfig};
use crate::{Error, Result};

/// Coupling scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Atm,
    Bqce,
    Bqcf,
    Bgfc,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Atm => "ATM",
            Method::Bqce => "BQCE",
            Method::Bqcf => "BQCF",
            Method::Bgfc => "BGFC",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ATM" => Ok(Method::Atm),
            "BQCE" => Ok(Method::Bqce),
            "BQCF" => Ok(Method::Bqcf),
            "BGFC" => Ok(Method::Bgfc),
            _ => Err(Error::InvalidInput(format!("unknown method {s:?}"))),
        }
    }
}

/// Ghost-force correction `g = ∇E_bqce(0) - R_bqcf(0)` per node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeadLoad {
    pub g: Vec<[f64; 2]>,
}

/// How a lattice site reads the nodal field.
#[derive(Clone, Copy, Debug)]
enum SiteLink {
    Node(usize),
    Interior([usize; 3], [f64; 3]),
    Outside,
}

/// A coupled model: lattice, mesh, blend, potential and loading.
#[derive(Clone, Debug)]
pub struct CoupledModel {
    method: Method,
    lattice: Lattice,
    mesh: TriMesh,
    blend: Blend,
    assembler: SiteAssembler,
    cb: CauchyBorn,
    links: Vec<SiteLink>,
    free: Vec<bool>,
    atm_sites: Vec<usize>,
    atm_weights: Vec<f64>,
    atm_phi0: Vec<f64>,
    force_sites: Vec<usize>,
    force_phi0: Vec<f64>,
    w0: f64,
    stress0: Matrix2<f64>,
    dead_load: Option<DeadLoad>,
}

impl CoupledModel {
    pub fn new(
        method: Method,
        lattice: Lattice,
        params: EamParams,
        loading: Matrix2<f64>,
        mesh: TriMesh,
        blend: Blend,
    ) -> Result<Self> {
        if method == Method::Atm {
            return Err(Error::InvalidInput("the atomistic model is not a coupled model".into()));
        }
        if blend.nodal.len() != mesh.num_nodes() || blend.atom_values.len() != lattice.len() {
            return Err(Error::InvalidInput("blend does not match the mesh and lattice".into()));
        }
        let assembler = SiteAssembler::new(&lattice, params, loading)?;
        let cb = CauchyBorn::with_basis(params, lattice.basis());
        let free: Vec<bool> = (0..mesh.num_nodes())
            .map(|n| !mesh.boundary()[n] && !mesh.node_coord(n).is_some_and(|c| lattice.is_removed(c)))
            .collect();
        let links: Vec<SiteLink> = (0..lattice.len())
            .map(|a| {
                if let Some(n) = mesh.node_at(lattice.coord(a)) {
                    SiteLink::Node(n)
                } else if let Some((t, l)) = mesh.locate(&lattice.position(a)) {
                    SiteLink::Interior(t, l)
                } else {
                    SiteLink::Outside
                }
            })
            .collect();
        let moving: Vec<bool> = links
            .iter()
            .map(|l| match *l {
                SiteLink::Node(n) => free[n],
                SiteLink::Interior(t, w) => t.iter().zip(w).any(|(&n, w)| free[n] && w != 0.0),
                SiteLink::Outside => false,
            })
            .collect();
        let near = |a: usize, set: &[bool]| {
            set[a] || assembler.offsets().iter().any(|d| lattice.neighbor(a, *d).is_some_and(|b| set[b]))
        };
        let complete = |a: usize| -> Result<()> {
            if assembler.stencil_complete(&lattice, a) {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!(
                    "site {:?} of the atomistic region has a truncated stencil; enlarge the lattice",
                    lattice.coord(a)
                )))
            }
        };

        let mut atm_sites = Vec::new();
        let mut atm_weights = Vec::new();
        for a in 0..lattice.len() {
            let beta = blend.atom_values[a];
            if beta < 1.0 && near(a, &moving) {
                complete(a)?;
                atm_sites.push(a);
                atm_weights.push(1.0 - beta);
            }
        }
        let atm_phi0 = assembler.reference_energies(&lattice, &atm_sites)?;

        // sites carrying a blended atomistic force
        let forced: Vec<bool> = links
            .iter()
            .map(|l| matches!(*l, SiteLink::Node(n) if free[n] && blend.nodal[n] < 1.0))
            .collect();
        let mut force_sites = Vec::new();
        for a in 0..lattice.len() {
            if near(a, &forced) {
                complete(a)?;
                force_sites.push(a);
            }
        }
        let force_phi0 = assembler.reference_energies(&lattice, &force_sites)?;
        let (w0, stress0) = cb.eval(&loading)?;

        let mut model = Self {
            method,
            lattice,
            mesh,
            blend,
            assembler,
            cb,
            links,
            free,
            atm_sites,
            atm_weights,
            atm_phi0,
            force_sites,
            force_phi0,
            w0,
            stress0,
            dead_load: None,
        };
        if method == Method::Bgfc {
            let zero = vec![[0.0; 2]; model.mesh.num_nodes()];
            let mut g = model.grad_bqce(&zero)?;
            let r = model.residual_bqcf(&zero)?;
            for (gi, ri) in g.iter_mut().zip(&r) {
                gi[0] -= ri[0];
                gi[1] -= ri[1];
            }
            model.dead_load = Some(DeadLoad { g });
        }
        Ok(model)
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    pub fn blend(&self) -> &Blend {
        &self.blend
    }

    pub fn loading(&self) -> &Matrix2<f64> {
        &self.assembler.loading
    }

    pub fn free_mask(&self) -> &[bool] {
        &self.free
    }

    pub fn num_nodes(&self) -> usize {
        self.mesh.num_nodes()
    }

    pub fn dead_load(&self) -> Option<&DeadLoad> {
        self.dead_load.as_ref()
    }

    fn check(&self, u: &[[f64; 2]]) -> Result<()> {
        if u.len() != self.mesh.num_nodes() {
            return Err(Error::InvalidInput(format!(
                "nodal field has {} entries, mesh has {} nodes",
                u.len(),
                self.mesh.num_nodes()
            )));
        }
        for (n, v) in u.iter().enumerate() {
            if !self.free[n] && (v[0] != 0.0 || v[1] != 0.0) {
                return Err(Error::InvalidInput(format!("clamped node {n} has non-zero displacement")));
            }
            if !v[0].is_finite() || !v[1].is_finite() {
                return Err(Error::NonFinite(format!("displacement at node {n}")));
            }
        }
        Ok(())
    }

    /// Site displacements of the P1 field (zero outside the mesh).
    pub fn site_field(&self, u: &[[f64; 2]]) -> Vec<[f64; 2]> {
        self.links
            .iter()
            .map(|l| match *l {
                SiteLink::Node(n) => u[n],
                SiteLink::Interior(t, w) => {
                    let mut v = [0.0; 2];
                    for (&n, w) in t.iter().zip(w) {
                        v[0] += w * u[n][0];
                        v[1] += w * u[n][1];
                    }
                    v
                }
                SiteLink::Outside => [0.0; 2],
            })
            .collect()
    }

    /// Adjoint of [`Self::site_field`].
    fn gather(&self, site_grad: &[[f64; 2]], out: &mut [[f64; 2]]) {
        for (l, g) in self.links.iter().zip(site_grad) {
            match *l {
                SiteLink::Node(n) => {
                    out[n][0] += g[0];
                    out[n][1] += g[1];
                }
                SiteLink::Interior(t, w) => {
                    for (&n, w) in t.iter().zip(w) {
                        out[n][0] += w * g[0];
                        out[n][1] += w * g[1];
                    }
                }
                SiteLink::Outside => {}
            }
        }
    }

    /// `Σ_T |T| w_T [W(B + ∇u_T) - W(B)]`, with the gradient added into
    /// `grad` when given.
    fn continuum(&self, u: &[[f64; 2]], weight: impl Fn(usize) -> f64, mut grad: Option<&mut [[f64; 2]]>) -> Result<f64> {
        let mut bonds = Vec::new();
        let mut v = Vec::new();
        let mut e = 0.0;
        let b = self.assembler.loading;
        for t in 0..self.mesh.num_triangles() {
            let w = weight(t);
            if w == 0.0 {
                continue;
            }
            let f = b + self.mesh.tri_gradient(t, u);
            if !(f.determinant() > 0.0) {
                return Err(Error::BondCollapse { site: t });
            }
            let (wf, p) = self.cb.eval_fast(&f, &mut bonds, &mut v)?;
            let scale = w * self.mesh.areas()[t];
            e += scale * (wf - self.w0);
            if let Some(g) = grad.as_deref_mut() {
                for (k, &n) in self.mesh.triangles()[t].iter().enumerate() {
                    let pg: Vector2<f64> = p * self.mesh.basis_gradients(t)[k];
                    g[n][0] += scale * pg.x;
                    g[n][1] += scale * pg.y;
                }
            }
        }
        if !e.is_finite() {
            return Err(Error::NonFinite("continuum energy".into()));
        }
        Ok(e)
    }

    fn bqce(&self, u: &[[f64; 2]], grad: Option<&mut [[f64; 2]]>) -> Result<f64> {
        self.check(u)?;
        let us = self.site_field(u);
        let beta_t = &self.blend.tri_values;
        match grad {
            Some(g) => {
                g.iter_mut().for_each(|x| *x = [0.0; 2]);
                let mut gs = vec![[0.0; 2]; self.lattice.len()];
                let ea = self.assembler.weighted(
                    &self.lattice,
                    &self.atm_sites,
                    Some(&self.atm_weights),
                    &self.atm_phi0,
                    &us,
                    Some(&mut gs),
                )?;
                self.gather(&gs, g);
                let ec = self.continuum(u, |t| beta_t[t], Some(&mut *g))?;
                self.clamp(g);
                Ok(ea + ec)
            }
            None => {
                let ea = self.assembler.weighted(
                    &self.lattice,
                    &self.atm_sites,
                    Some(&self.atm_weights),
                    &self.atm_phi0,
                    &us,
                    None,
                )?;
                Ok(ea + self.continuum(u, |t| beta_t[t], None)?)
            }
        }
    }

    fn clamp(&self, g: &mut [[f64; 2]]) {
        for (x, &f) in g.iter_mut().zip(&self.free) {
            if !f {
                *x = [0.0; 2];
            }
        }
    }

    /// Blended energy: weighted site energies plus the `β`-weighted
    /// Cauchy–Born energy by midpoint quadrature.
    pub fn energy_bqce(&self, u: &[[f64; 2]]) -> Result<f64> {
        self.bqce(u, None)
    }

    pub fn grad_bqce(&self, u: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
        let mut g = vec![[0.0; 2]; self.mesh.num_nodes()];
        self.bqce(u, Some(&mut g))?;
        Ok(g)
    }

    /// Blended force residual (gradient sign): at free nodes identified
    /// with an atom, `(1 - β) ∂E_atm + β ∂E_cb`; elsewhere `∂E_cb`.
    pub fn residual_bqcf(&self, u: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
        self.check(u)?;
        let n = self.mesh.num_nodes();
        let beta = &self.blend.nodal;
        let mut cb = vec![[0.0; 2]; n];
        let tris = self.mesh.triangles();
        self.continuum(u, |t| if tris[t].iter().any(|&k| beta[k] > 0.0) { 1.0 } else { 0.0 }, Some(&mut cb))?;
        let us = self.site_field(u);
        let mut gs = vec![[0.0; 2]; self.lattice.len()];
        self.assembler.weighted(&self.lattice, &self.force_sites, None, &self.force_phi0, &us, Some(&mut gs))?;
        let mut out = cb;
        for (a, l) in self.links.iter().enumerate() {
            if let SiteLink::Node(k) = *l {
                let b = beta[k];
                if b < 1.0 {
                    out[k][0] = (1.0 - b) * gs[a][0] + b * out[k][0];
                    out[k][1] = (1.0 - b) * gs[a][1] + b * out[k][1];
                }
            }
        }
        self.clamp(&mut out);
        Ok(out)
    }

    /// Blended forces, `-residual_bqcf`.
    pub fn forces_bqcf(&self, u: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
        let mut f = self.residual_bqcf(u)?;
        f.iter_mut().for_each(|v| *v = [-v[0], -v[1]]);
        Ok(f)
    }

    fn require_dead_load(&self) -> Result<&DeadLoad> {
        self.dead_load
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("{} model has no dead load", self.method)))
    }

    /// `E_bqce(u) - ⟨g, u⟩`.
    pub fn energy_bgfc(&self, u: &[[f64; 2]]) -> Result<f64> {
        let g = self.require_dead_load()?;
        Ok(self.energy_bqce(u)? - dot(&g.g, u))
    }

    pub fn grad_bgfc(&self, u: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
        let g = self.require_dead_load()?;
        let mut out = self.grad_bqce(u)?;
        for (o, gi) in out.iter_mut().zip(&g.g) {
            o[0] -= gi[0];
            o[1] -= gi[1];
        }
        Ok(out)
    }

    /// Corrected energy written with second-order remainders,
    /// `Σ (1-β_a) [Φ_a(u) - Φ_a(0) - ⟨δΦ_a(0), u⟩] + Σ_T |T| β_T [W(B+∇u) - W(B) - ∂W(B):∇u]`.
    ///
    /// Only defined on defect-free lattices, where the remaining linear
    /// term of the atomistic model vanishes.
    pub fn energy_renormalized(&self, u: &[[f64; 2]]) -> Result<f64> {
        if !self.lattice.removed().is_empty() {
            return Err(Error::InvalidInput("the renormalized form requires a defect-free lattice".into()));
        }
        self.check(u)?;
        let us = self.site_field(u);
        let zero = vec![[0.0; 2]; self.lattice.len()];
        let mut e = self.assembler.weighted(
            &self.lattice,
            &self.atm_sites,
            Some(&self.atm_weights),
            &self.atm_phi0,
            &us,
            None,
        )?;
        for (&a, w) in self.atm_sites.iter().zip(&self.atm_weights) {
            e -= w * self.assembler.linear_term(&self.lattice, a, &us, &zero)?;
        }
        e += self.continuum(u, |t| self.blend.tri_values[t], None)?;
        for t in 0..self.mesh.num_triangles() {
            let bt = self.blend.tri_values[t];
            if bt != 0.0 {
                let du = self.mesh.tri_gradient(t, u);
                e -= bt * self.mesh.areas()[t] * self.stress0.component_mul(&du).sum();
            }
        }
        Ok(e)
    }

    /// Energy of the model's own functional (BQCE for BQCF).
    pub fn energy(&self, u: &[[f64; 2]]) -> Result<f64> {
        match self.method {
            Method::Bgfc => self.energy_bgfc(u),
            _ => self.energy_bqce(u),
        }
    }

    /// Gradient (BQCE, BGFC) or force residual (BQCF).
    pub fn residual(&self, u: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
        match self.method {
            Method::Bgfc => self.grad_bgfc(u),
            Method::Bqcf => self.residual_bqcf(u),
            _ => self.grad_bqce(u),
        }
    }

    /// Scalar stiffness matrix on free nodes.
    pub fn preconditioner(&self) -> Result<CholeskyLaplacian> {
        CholeskyLaplacian::from_triplets(self.mesh.num_nodes(), &stiffness_triplets(&self.mesh), &self.free, 0.0)
    }

    /// Minimises (BQCE, BGFC) or solves the force balance (BQCF) from
    /// `u = 0`. The reported energy of a BQCF solution is the BQCE energy.
    pub fn solve(&self, cfg: &SolverConfig) -> Result<SolveResult> {
        let p = self.preconditioner()?;
        let u0 = vec![0.0; 2 * self.mesh.num_nodes()];
        let pre: Option<&dyn Preconditioner> = Some(&p);
        let mut res = match self.method {
            Method::Bqcf => force_balance(self, &u0, cfg, pre)?,
            _ => minimize(self, &u0, cfg, pre)?,
        };
        if self.method == Method::Bqcf && res.u.iter().all(|x| x.is_finite()) {
            res.energy = self.energy_bqce(res.u.as_chunks::<2>().0)?;
        }
        Ok(res)
    }
}

fn dot(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x[0] * y[0] + x[1] * y[1]).sum()
}

impl Objective for CoupledModel {
    fn dim(&self) -> usize {
        2 * self.mesh.num_nodes()
    }

    fn energy_gradient(&self, u: &[f64], grad: &mut [f64]) -> Result<f64> {
        let (uc, _) = u.as_chunks::<2>();
        let (gc, _) = grad.as_chunks_mut::<2>();
        match self.method {
            Method::Bqce => self.bqce(uc, Some(gc)),
            Method::Bgfc => {
                let e = self.bqce(uc, Some(&mut *gc))?;
                let g = self.require_dead_load()?;
                for (o, gi) in gc.iter_mut().zip(&g.g) {
                    o[0] -= gi[0];
                    o[1] -= gi[1];
                }
                Ok(e - dot(&g.g, uc))
            }
            m => Err(Error::InvalidInput(format!("{m} has no energy functional to minimise"))),
        }
    }

    fn energy(&self, u: &[f64]) -> Result<f64> {
        CoupledModel::energy(self, u.as_chunks::<2>().0)
    }
}

impl Residual for CoupledModel {
    fn dim(&self) -> usize {
        2 * self.mesh.num_nodes()
    }

    fn residual(&self, u: &[f64], out: &mut [f64]) -> Result<()> {
        let r = CoupledModel::residual(self, u.as_chunks::<2>().0)?;
        out.copy_from_slice(r.as_flattened());
        Ok(())
    }
}

/// Geometry and material of a coupled problem around a vacancy row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingSetup {
    pub defect_k: usize,
    pub r_a: f64,
    pub r_b: f64,
    pub r_c: f64,
    pub exponent: f64,
    pub blend: BlendKind,
    pub params: EamParams,
    pub loading: Matrix2<f64>,
}

impl CouplingSetup {
    pub fn size_field(&self) -> Result<SizeField> {
        SizeField::new(self.r_a, self.r_b, self.r_c, self.exponent)
    }

    /// Hexagonal lattice covering the refined region plus one stencil.
    pub fn lattice(&self) -> Result<Lattice> {
        let sf = self.size_field()?;
        let layers = sf.refined_layers().min(sf.outer_layers()) + 4;
        build_lattice(&LatticeSpec::new(Region::Hexagon { layers }, self.defect_k))
    }

    pub fn build(&self, method: Method) -> Result<CoupledModel> {
        let sf = self.size_field()?;
        let lat = self.lattice()?;
        let mesh = build_graded_mesh(&lat, &sf)?;
        let blend = match self.blend {
            BlendKind::Spline => spline_beta(&mesh, &lat, self.r_a, self.r_b)?,
            BlendKind::Optimized => optimize_beta(&mesh, &lat, self.r_a, self.r_b)?,
        };
        CoupledModel::new(method, lat, self.params, self.loading, mesh, blend)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atomistic::{energy_atm, grad_atm, Displacement, FreeRegion, LoadedProblem};
    use crate::potential::equilibrium_scale;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn f0() -> Matrix2<f64> {
        Matrix2::identity() * equilibrium_scale(&EamParams::default()).unwrap()
    }

    fn sheared() -> Matrix2<f64> {
        Matrix2::new(1.03, 0.03, 0.0, 1.03) * f0()
    }

    fn setup(k: usize, r_a: f64, r_b: f64, r_c: f64, loading: Matrix2<f64>) -> CouplingSetup {
        CouplingSetup {
            defect_k: k,
            r_a,
            r_b,
            r_c,
            exponent: 1.5,
            blend: BlendKind::Spline,
            params: EamParams::default(),
            loading,
        }
    }

    fn random_u(m: &CoupledModel, amp: f64, seed: u64) -> Vec<[f64; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m.num_nodes())
            .map(|n| {
                if m.free_mask()[n] {
                    [amp * rng.random_range(-1.0..1.0), amp * rng.random_range(-1.0..1.0)]
                } else {
                    [0.0; 2]
                }
            })
            .collect()
    }

    fn max_abs(v: &[[f64; 2]]) -> f64 {
        v.iter().flatten().fold(0.0, |m: f64, x| m.max(x.abs()))
    }

    fn fd_check(m: &CoupledModel, u: &[[f64; 2]], e: impl Fn(&[[f64; 2]]) -> f64, g: &[[f64; 2]], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-5;
        let gmax = max_abs(g);
        for _ in 0..12 {
            let n = loop {
                let n = rng.random_range(0..m.num_nodes());
                if m.free_mask()[n] {
                    break n;
                }
            };
            for c in 0..2 {
                let mut up = u.to_vec();
                let mut dn = u.to_vec();
                up[n][c] += h;
                dn[n][c] -= h;
                let fd = (e(&up) - e(&dn)) / (2.0 * h);
                assert!((fd - g[n][c]).abs() <= 1e-6 * gmax, "node {n}: {fd} vs {}", g[n][c]);
            }
        }
    }

    #[test]
    fn zero_displacement_has_zero_energy() {
        let m = setup(2, 4.0, 6.0, 12.0, sheared()).build(Method::Bgfc).unwrap();
        let z = vec![[0.0; 2]; m.num_nodes()];
        assert_eq!(m.energy_bqce(&z).unwrap(), 0.0);
        assert_eq!(m.energy_bgfc(&z).unwrap(), 0.0);
    }

    #[test]
    fn atomistic_model_is_not_coupled() {
        assert!(setup(0, 4.0, 6.0, 12.0, f0()).build(Method::Atm).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for method in [Method::Bqce, Method::Bgfc] {
            let m = setup(2, 4.0, 6.0, 14.0, sheared()).build(method).unwrap();
            for seed in 0..2 {
                let u = random_u(&m, 0.02, seed);
                let g = m.residual(&u).unwrap();
                fd_check(&m, &u, |v| m.energy(v).unwrap(), &g, seed + 10);
            }
        }
    }

    #[test]
    fn clamped_nodes_rejected() {
        let m = setup(0, 4.0, 6.0, 12.0, f0()).build(Method::Bqce).unwrap();
        let mut u = vec![[0.0; 2]; m.num_nodes()];
        let b = m.free_mask().iter().position(|f| !f).unwrap();
        u[b] = [1e-3, 0.0];
        assert!(m.energy_bqce(&u).is_err());
        assert!(m.energy_bqce(&u[1..]).is_err());
    }

    #[test]
    fn ghost_forces() {
        let s = setup(0, 4.0, 6.0, 14.0, f0());
        let z = |m: &CoupledModel| vec![[0.0; 2]; m.num_nodes()];
        let bqce = s.build(Method::Bqce).unwrap();
        let g = bqce.grad_bqce(&z(&bqce)).unwrap();
        assert!(max_abs(&g) > 1e-4);
        // no ghost forces where the blend is flat
        for (n, x) in bqce.mesh().nodes().iter().enumerate() {
            let d = bqce.lattice().core_distance(x);
            if d < 4.0 - 2.0 - 1e-9 || d > 6.0 + 2.0 + 1e-9 {
                assert!(g[n][0].abs() < 1e-12 && g[n][1].abs() < 1e-12, "node {n} at {d}: {:?}", g[n]);
            }
        }
        let bqcf = s.build(Method::Bqcf).unwrap();
        assert!(max_abs(&bqcf.residual_bqcf(&z(&bqcf)).unwrap()) < 1e-12);
        let bgfc = s.build(Method::Bgfc).unwrap();
        assert!(max_abs(&bgfc.grad_bgfc(&z(&bgfc)).unwrap()) < 1e-12);
        // dead load equals the BQCE ghost force here
        let dl = &bgfc.dead_load().unwrap().g;
        for (a, b) in dl.iter().zip(&g) {
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn bqcf_has_no_ghost_forces_under_shear() {
        let m = setup(0, 4.0, 6.0, 14.0, sheared()).build(Method::Bqcf).unwrap();
        let r = m.residual_bqcf(&vec![[0.0; 2]; m.num_nodes()]).unwrap();
        assert!(max_abs(&r) < 1e-12, "{}", max_abs(&r));
    }

    #[test]
    fn bgfc_identity_with_defect() {
        let s = setup(2, 4.0, 6.0, 14.0, sheared());
        let m = s.build(Method::Bgfc).unwrap();
        let z = vec![[0.0; 2]; m.num_nodes()];
        let g = m.grad_bgfc(&z).unwrap();
        let f = m.forces_bqcf(&z).unwrap();
        for (a, b) in g.iter().zip(&f) {
            assert!((a[0] + b[0]).abs() < 1e-14 && (a[1] + b[1]).abs() < 1e-14);
        }
        // the corrected residual keeps the vacancy forces of the atomistic model
        let p = LoadedProblem::new(m.lattice().clone(), EamParams::default(), sheared(), FreeRegion::Layers(3)).unwrap();
        let ga = grad_atm(&p, &Displacement::zeros(p.len())).unwrap();
        let mut core = 0.0f64;
        for a in 0..p.len() {
            if m.lattice().layer(a) <= 2 {
                let n = m.mesh().node_at(m.lattice().coord(a)).unwrap();
                assert!((g[n][0] - ga.values[a][0]).abs() < 1e-12 && (g[n][1] - ga.values[a][1]).abs() < 1e-12);
                core = core.max(g[n][0].abs().max(g[n][1].abs()));
            }
        }
        assert!(core > 1e-3, "{core}");
    }

    #[test]
    fn correction_is_linear() {
        let m = setup(2, 4.0, 6.0, 12.0, sheared()).build(Method::Bgfc).unwrap();
        let u = random_u(&m, 0.01, 1);
        let v = random_u(&m, 0.01, 2);
        let d = |w: &[[f64; 2]]| m.energy_bgfc(w).unwrap() - m.energy_bqce(w).unwrap();
        let two: Vec<_> = u.iter().map(|x| [2.0 * x[0], 2.0 * x[1]]).collect();
        let sum: Vec<_> = u.iter().zip(&v).map(|(x, y)| [x[0] + y[0], x[1] + y[1]]).collect();
        assert!((d(&two) - 2.0 * d(&u)).abs() < 1e-12);
        assert!((d(&sum) - d(&u) - d(&v)).abs() < 1e-12);
    }

    #[test]
    fn renormalized_form_matches_dead_load_form() {
        for b in [f0(), sheared()] {
            let m = setup(0, 4.0, 7.0, 14.0, b).build(Method::Bgfc).unwrap();
            for seed in 0..3 {
                let u = random_u(&m, 0.02, seed);
                let a = m.energy_bgfc(&u).unwrap();
                let r = m.energy_renormalized(&u).unwrap();
                assert!((a - r).abs() < 1e-10, "{a} vs {r}");
            }
        }
        let with_defect = setup(2, 4.0, 7.0, 14.0, f0()).build(Method::Bgfc).unwrap();
        let z = vec![[0.0; 2]; with_defect.num_nodes()];
        assert!(with_defect.energy_renormalized(&z).is_err());
    }

    /// Fully refined hexagon with a constant blend, and the matching
    /// atomistic problem.
    fn limit_pair(beta: f64, method: Method) -> (CoupledModel, LoadedProblem) {
        let l = 8u32;
        let sf = SizeField::new(l as f64, l as f64, l as f64, 1.5).unwrap();
        let lat = build_lattice(&LatticeSpec::new(Region::Hexagon { layers: l + 4 }, 2)).unwrap();
        let mesh = build_graded_mesh(&lat, &sf).unwrap();
        let blend = Blend::uniform(&mesh, &lat, beta).unwrap();
        let m = CoupledModel::new(method, lat.clone(), EamParams::default(), sheared(), mesh, blend).unwrap();
        let p = LoadedProblem::new(lat, EamParams::default(), sheared(), FreeRegion::Layers(l - 1)).unwrap();
        (m, p)
    }

    #[test]
    fn zero_blend_is_atomistic() {
        let (m, p) = limit_pair(0.0, Method::Bqce);
        let u = random_u(&m, 0.03, 5);
        let us = Displacement { values: m.site_field(&u) };
        assert!((m.energy_bqce(&u).unwrap() - energy_atm(&p, &us).unwrap()).abs() < 1e-12);
        let ga = grad_atm(&p, &us).unwrap();
        let (mf, _) = limit_pair(0.0, Method::Bqcf);
        for g in [m.grad_bqce(&u).unwrap(), mf.residual_bqcf(&u).unwrap()] {
            for (a, node) in (0..p.len()).filter_map(|a| m.mesh().node_at(m.lattice().coord(a)).map(|n| (a, n))) {
                assert!((g[node][0] - ga.values[a][0]).abs() < 1e-12);
                assert!((g[node][1] - ga.values[a][1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_blend_is_cauchy_born() {
        let (m, _) = limit_pair(1.0, Method::Bqce);
        let (mf, _) = limit_pair(1.0, Method::Bqcf);
        let u = random_u(&m, 0.03, 6);
        let cb = CauchyBorn::with_basis(EamParams::default(), m.lattice().basis());
        let w0 = cb.energy(&sheared()).unwrap();
        let direct: f64 = (0..m.mesh().num_triangles())
            .map(|t| m.mesh().areas()[t] * (cb.energy(&(sheared() + m.mesh().tri_gradient(t, &u))).unwrap() - w0))
            .sum();
        assert!((m.energy_bqce(&u).unwrap() - direct).abs() < 1e-12);
        let g = m.grad_bqce(&u).unwrap();
        let r = mf.residual_bqcf(&u).unwrap();
        for (a, b) in g.iter().zip(&r) {
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn bqcf_matches_minimiser_when_conservative() {
        // with β ∈ {0, 1} only at nodes, blended forces are not conservative;
        // use a constant blend where both limits agree with BQCE
        let (m, _) = limit_pair(1.0, Method::Bqce);
        let (mf, _) = limit_pair(1.0, Method::Bqcf);
        let cfg = SolverConfig { grad_tol: 1e-10, ..SolverConfig::default() };
        let a = m.solve(&cfg).unwrap();
        let b = mf.solve(&cfg).unwrap();
        assert!(a.converged && b.converged);
        let d = a.u.iter().zip(&b.u).fold(0.0f64, |x, (p, q)| x.max((p - q).abs()));
        assert!(d < 1e-6, "{d}");
    }

    #[test]
    fn small_divacancy_solves() {
        let s = setup(2, 4.0, 6.0, 12.0, sheared());
        let cfg = SolverConfig { grad_tol: 1e-8, ..SolverConfig::default() };
        for method in [Method::Bqce, Method::Bgfc, Method::Bqcf] {
            let m = s.build(method).unwrap();
            let r = m.solve(&cfg).unwrap();
            assert!(r.converged, "{method}");
            assert!(r.energy.is_finite() && r.energy < 0.0, "{method}: {}", r.energy);
        }
    }

    #[test]
    fn dead_load_locality() {
        let m = setup(2, 6.0, 9.0, 18.0, sheared()).build(Method::Bgfc).unwrap();
        let dl = &m.dead_load().unwrap().g;
        for (n, x) in m.mesh().nodes().iter().enumerate() {
            let d = m.lattice().core_distance(x);
            // away from the defect and the blending annulus
            if d > 1.5 + 2.0 && (d < 6.0 - 2.0 || d > 9.0 + 2.0) {
                assert!(dl[n][0].abs() < 1e-12 && dl[n][1].abs() < 1e-12, "{n} {d} {:?}", dl[n]);
            }
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Atm, Method::Bqce, Method::Bqcf, Method::Bgfc] {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            let j = serde_json::to_string(&m).unwrap();
            assert_eq!(j, format!("\"{}\"", m.as_str()));
        }
        assert!("GRAC".parse::<Method>().is_err());
    }
}
