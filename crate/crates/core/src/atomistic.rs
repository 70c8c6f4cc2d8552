//! Atomistic energy differences relative to a homogeneous predictor.
//!
//! A deformation is `y(a) = B a + u(a)`; the energy of a displacement is the
//! sum of site-energy differences `Φ_a(Bx + u) - Φ_a(Bx)`. Sites outside the
//! free region are clamped to the predictor.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::lattice::{hop_norm, lattice_directions, Coord, Lattice, Region};
use crate::potential::{site_gradient, EamParams};
use crate::precond::{BoxLaplacian, Preconditioner};
use crate::solver::{minimize, Objective, SolveResult, SolverConfig};
use crate::{Error, Result};

/// Per-site displacement field (or covector).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Displacement {
    pub values: Vec<[f64; 2]>,
}

impl Displacement {
    pub fn zeros(n: usize) -> Self {
        Self { values: vec![[0.0; 2]; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_flat(&self) -> &[f64] {
        self.values.as_flattened()
    }

    pub fn from_flat(v: &[f64]) -> Self {
        let (chunks, rest) = v.as_chunks::<2>();
        debug_assert!(rest.is_empty());
        Self { values: chunks.to_vec() }
    }

    pub fn max_norm(&self) -> f64 {
        self.values.iter().flat_map(|v| v.iter()).fold(0.0_f64, |m, x| m.max(x.abs()))
    }
}

/// Site-energy evaluation on a lattice under a homogeneous predictor.
///
/// Shared by the atomistic model and the atomistic part of the coupled
/// functionals.
#[derive(Clone, Debug)]
pub struct SiteAssembler {
    pub params: EamParams,
    pub loading: Matrix2<f64>,
    offsets: Vec<Coord>,
    ref_bonds: Vec<Vector2<f64>>,
}

/// Scratch buffers for one site evaluation.
#[derive(Default)]
pub(crate) struct SiteScratch {
    nbrs: Vec<usize>,
    bonds: Vec<Vector2<f64>>,
    v: Vec<Vector2<f64>>,
}

impl SiteAssembler {
    pub fn new(lat: &Lattice, params: EamParams, loading: Matrix2<f64>) -> Result<Self> {
        params.validate()?;
        if !(loading.determinant() > 0.0) {
            return Err(Error::InvalidInput(format!("loading must have positive determinant: {loading}")));
        }
        let offsets: Vec<Coord> = lattice_directions(lat.basis(), params.r_cut);
        if offsets.iter().any(|d| hop_norm(*d) > 3) {
            return Err(Error::InvalidInput("cutoff exceeds the supported stencil range".into()));
        }
        let ref_bonds = offsets
            .iter()
            .map(|d| loading * lat.to_position(*d))
            .collect();
        Ok(Self { params, loading, offsets, ref_bonds })
    }

    pub fn offsets(&self) -> &[Coord] {
        &self.offsets
    }

    /// Whether every stencil neighbour of `a` is either present or a vacancy.
    pub fn stencil_complete(&self, lat: &Lattice, a: usize) -> bool {
        let c = lat.coord(a);
        self.offsets.iter().all(|d| {
            let n = [c[0] + d[0], c[1] + d[1]];
            lat.index_of(n).is_some() || lat.is_removed(n)
        })
    }

    /// Site energy `Φ_a(Bx + u)` of one site.
    pub fn site_energy_at(&self, lat: &Lattice, a: usize, u: &[[f64; 2]]) -> Result<f64> {
        if u.len() != lat.len() {
            return Err(Error::InvalidInput("displacement length does not match the lattice".into()));
        }
        self.site(lat, a, u, &mut SiteScratch::default(), false)
    }

    /// Site energy `Φ_a(Bx + u)`, filling `s.v` with the bond derivatives
    /// and `s.nbrs` with neighbour indices when `grad` is set.
    #[inline]
    pub(crate) fn site(&self, lat: &Lattice, a: usize, u: &[[f64; 2]], s: &mut SiteScratch, grad: bool) -> Result<f64> {
        s.nbrs.clear();
        s.bonds.clear();
        let ua = u[a];
        for (d, rb) in self.offsets.iter().zip(&self.ref_bonds) {
            if let Some(b) = lat.neighbor(a, *d) {
                let ub = u[b];
                s.nbrs.push(b);
                s.bonds.push(Vector2::new(rb.x + ub[0] - ua[0], rb.y + ub[1] - ua[1]));
            }
        }
        if grad {
            site_gradient(&self.params, &s.bonds, &mut s.v).map_err(|_| Error::BondCollapse { site: a })
        } else {
            let mut pair = 0.0;
            let mut rho = 0.0;
            for g in &s.bonds {
                let r = g.norm();
                if !(r > 0.0) {
                    return Err(Error::BondCollapse { site: a });
                }
                let t = crate::potential::pair_terms_unchecked(r, &self.params);
                pair += t.phi;
                rho += t.psi;
            }
            Ok(pair + crate::potential::embed(rho, &self.params).0)
        }
    }

    /// `Σ_a w_a [Φ_a(Bx+u) - Φ_a(Bx)]` over `sites`, accumulating the
    /// gradient into `grad` when given.
    pub(crate) fn weighted(
        &self,
        lat: &Lattice,
        sites: &[usize],
        weights: Option<&[f64]>,
        phi0: &[f64],
        u: &[[f64; 2]],
        mut grad: Option<&mut [[f64; 2]]>,
    ) -> Result<f64> {
        let mut s = SiteScratch::default();
        let mut e = 0.0;
        for (k, &a) in sites.iter().enumerate() {
            let w = weights.map_or(1.0, |w| w[k]);
            if w == 0.0 {
                continue;
            }
            let phi = self.site(lat, a, u, &mut s, grad.is_some())?;
            e += w * (phi - phi0[k]);
            if let Some(g) = grad.as_deref_mut() {
                for (&b, v) in s.nbrs.iter().zip(&s.v) {
                    g[b][0] += w * v.x;
                    g[b][1] += w * v.y;
                    g[a][0] -= w * v.x;
                    g[a][1] -= w * v.y;
                }
            }
        }
        if !e.is_finite() {
            return Err(Error::NonFinite("atomistic energy".into()));
        }
        Ok(e)
    }

    /// Predictor site energies `Φ_a(Bx)`.
    pub(crate) fn reference_energies(&self, lat: &Lattice, sites: &[usize]) -> Result<Vec<f64>> {
        let zero = vec![[0.0; 2]; lat.len()];
        let mut s = SiteScratch::default();
        sites.iter().map(|&a| self.site(lat, a, &zero, &mut s, false)).collect()
    }

    /// `⟨δΦ_a(Bx), u⟩` for a single site.
    pub(crate) fn linear_term(&self, lat: &Lattice, a: usize, u: &[[f64; 2]], zero: &[[f64; 2]]) -> Result<f64> {
        let mut s = SiteScratch::default();
        self.site(lat, a, zero, &mut s, true)?;
        Ok(s.nbrs
            .iter()
            .zip(&s.v)
            .map(|(&b, v)| v.x * (u[b][0] - u[a][0]) + v.y * (u[b][1] - u[a][1]))
            .sum())
    }
}

/// Atomistic problem with far-field Dirichlet loading.
#[derive(Clone, Debug)]
pub struct LoadedProblem {
    pub lattice: Lattice,
    pub assembler: SiteAssembler,
    free: Vec<bool>,
    /// Sites whose energy depends on a free site.
    active: Vec<usize>,
    phi0: Vec<f64>,
}

/// Which sites of a [`LoadedProblem`] may move.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreeRegion {
    /// Sites within this many hops of the defect row.
    Layers(u32),
    /// Sites of the parallelogram with this half width.
    Parallelogram(u32),
}

impl FreeRegion {
    pub fn contains(&self, lat: &Lattice, a: usize) -> bool {
        let c = lat.coord(a);
        let row = lat.defect_row();
        match *self {
            FreeRegion::Layers(n) => lat.layer(a) <= n as i64,
            FreeRegion::Parallelogram(l) => {
                let l = l as i64;
                c[1].abs() <= l && c[0] >= row[0] - l && c[0] <= row[1] + l
            }
        }
    }
}

impl LoadedProblem {
    pub fn new(lattice: Lattice, params: EamParams, loading: Matrix2<f64>, free_region: FreeRegion) -> Result<Self> {
        let assembler = SiteAssembler::new(&lattice, params, loading)?;
        let free: Vec<bool> = (0..lattice.len()).map(|a| free_region.contains(&lattice, a)).collect();
        // active sites: free, or with a free stencil neighbour
        let mut active = Vec::new();
        for a in 0..lattice.len() {
            let touches = free[a]
                || assembler
                    .offsets()
                    .iter()
                    .any(|d| lattice.neighbor(a, *d).is_some_and(|b| free[b]));
            if touches {
                if !assembler.stencil_complete(&lattice, a) {
                    return Err(Error::InvalidInput(format!(
                        "site {:?} near the free region has a truncated stencil; enlarge the lattice",
                        lattice.coord(a)
                    )));
                }
                active.push(a);
            }
        }
        let phi0 = assembler.reference_energies(&lattice, &active)?;
        Ok(Self { lattice, assembler, free, active, phi0 })
    }

    pub fn len(&self) -> usize {
        self.lattice.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lattice.is_empty()
    }

    pub fn is_free(&self, a: usize) -> bool {
        self.free[a]
    }

    pub fn free_mask(&self) -> &[bool] {
        &self.free
    }

    pub fn loading(&self) -> &Matrix2<f64> {
        &self.assembler.loading
    }

    fn check(&self, u: &[[f64; 2]]) -> Result<()> {
        if u.len() != self.len() {
            return Err(Error::InvalidInput(format!(
                "displacement has {} entries, lattice has {}",
                u.len(),
                self.len()
            )));
        }
        for (a, v) in u.iter().enumerate() {
            if !self.free[a] && (v[0] != 0.0 || v[1] != 0.0) {
                return Err(Error::InvalidInput(format!("clamped site {a} has non-zero displacement")));
            }
        }
        Ok(())
    }

    pub(crate) fn energy_grad_raw(&self, u: &[[f64; 2]], grad: Option<&mut [[f64; 2]]>) -> Result<f64> {
        match grad {
            Some(g) => {
                g.iter_mut().for_each(|x| *x = [0.0; 2]);
                let e = self.assembler.weighted(&self.lattice, &self.active, None, &self.phi0, u, Some(g))?;
                for (x, &f) in g.iter_mut().zip(&self.free) {
                    if !f {
                        *x = [0.0; 2];
                    }
                }
                Ok(e)
            }
            None => self.assembler.weighted(&self.lattice, &self.active, None, &self.phi0, u, None),
        }
    }
}

/// `Σ_a [Φ_a(Bx + u) - Φ_a(Bx)]`.
pub fn energy_atm(prob: &LoadedProblem, u: &Displacement) -> Result<f64> {
    prob.check(&u.values)?;
    prob.energy_grad_raw(&u.values, None)
}

/// Energy gradient with clamped entries zeroed.
pub fn grad_atm(prob: &LoadedProblem, u: &Displacement) -> Result<Displacement> {
    prob.check(&u.values)?;
    let mut g = Displacement::zeros(prob.len());
    prob.energy_grad_raw(&u.values, Some(&mut g.values))?;
    Ok(g)
}

impl Objective for LoadedProblem {
    fn dim(&self) -> usize {
        2 * self.len()
    }

    fn energy_gradient(&self, u: &[f64], grad: &mut [f64]) -> Result<f64> {
        let (uc, _) = u.as_chunks::<2>();
        let (gc, _) = grad.as_chunks_mut::<2>();
        self.energy_grad_raw(uc, Some(gc))
    }

    fn energy(&self, u: &[f64]) -> Result<f64> {
        let (uc, _) = u.as_chunks::<2>();
        self.energy_grad_raw(uc, None)
    }
}

/// Preconditioner matched to the free region, when one is available.
pub fn reference_preconditioner(prob: &LoadedProblem, free_region: FreeRegion) -> Option<BoxLaplacian> {
    match (free_region, prob.lattice.region()) {
        (FreeRegion::Parallelogram(l), Region::Parallelogram { .. }) => {
            BoxLaplacian::for_lattice(&prob.lattice, l, 2).ok()
        }
        _ => None,
    }
}

/// Minimises the atomistic energy to `‖∇E‖_∞ <= tol`.
pub fn solve_reference(prob: &LoadedProblem, tol: f64) -> Result<(Displacement, SolveResult)> {
    solve_reference_with(prob, tol, None, &SolverConfig::default())
}

pub fn solve_reference_with(
    prob: &LoadedProblem,
    tol: f64,
    precond: Option<&dyn Preconditioner>,
    cfg: &SolverConfig,
) -> Result<(Displacement, SolveResult)> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    let cfg = SolverConfig { grad_tol: tol, ..cfg.clone() };
    let u0 = vec![0.0; prob.dim()];
    let res = minimize(prob, &u0, &cfg, precond)?;
    if !res.converged {
        return Err(Error::Solver {
            iterations: res.iterations,
            reason: format!("reference solve stopped at gradient norm {:.3e}", res.grad_norm),
        });
    }
    Ok((Displacement::from_flat(&res.u), res))
}
