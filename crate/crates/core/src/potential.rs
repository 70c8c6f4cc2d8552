//! EAM toy potential and the Cauchy–Born strain energy density.
//!
//! Site energy: `Φ = Σ_ρ φ(|g_ρ|) + F(Σ_ρ ψ(|g_ρ|))` over the bond vectors
//! `g_ρ` of a site, with a Morse pair term, exponential density and a quartic
//! embedding function around the reference density.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::lattice::{lattice_directions, triangular_basis};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EamParams {
    /// Pair-potential decay.
    pub a: f64,
    /// Density decay.
    pub b: f64,
    /// Embedding strength.
    pub c: f64,
    /// Reference density of the embedding function.
    pub rho0: f64,
    /// Interaction radius in the reference configuration.
    pub r_cut: f64,
}

impl Default for EamParams {
    fn default() -> Self {
        let b = 3.0;
        Self { a: 4.4, b, c: 5.0, rho0: 6.0 * (-b).exp(), r_cut: 2.0 }
    }
}

impl EamParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.b > 0.0 && self.c > 0.0) {
            return Err(Error::InvalidInput(format!("EAM parameters must be positive: {self:?}")));
        }
        if !(self.r_cut > 1.0) {
            return Err(Error::InvalidInput(format!("cutoff must exceed 1, got {}", self.r_cut)));
        }
        Ok(())
    }
}

/// Pair and density terms with their derivatives at one bond length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairTerms {
    pub phi: f64,
    pub dphi: f64,
    pub psi: f64,
    pub dpsi: f64,
}

#[inline]
pub(crate) fn pair_terms_unchecked(r: f64, p: &EamParams) -> PairTerms {
    let e = (-p.a * (r - 1.0)).exp();
    let psi = (-p.b * r).exp();
    PairTerms {
        phi: e * e - 2.0 * e,
        dphi: 2.0 * p.a * (e - e * e),
        psi,
        dpsi: -p.b * psi,
    }
}

pub fn pair_terms(r: f64, p: &EamParams) -> Result<PairTerms> {
    if !(r > 0.0) {
        return Err(Error::InvalidInput(format!("bond length must be positive, got {r}")));
    }
    Ok(pair_terms_unchecked(r, p))
}

/// Embedding function and its derivative.
#[inline]
pub fn embed(rho: f64, p: &EamParams) -> (f64, f64) {
    let d = rho - p.rho0;
    let d2 = d * d;
    (p.c * (d2 + d2 * d2), p.c * (2.0 * d + 4.0 * d2 * d))
}

/// Site energy of a site with the given deformed bond vectors.
pub fn site_energy(p: &EamParams, bonds: &[Vector2<f64>]) -> Result<f64> {
    let mut pair = 0.0;
    let mut rho = 0.0;
    for g in bonds {
        let r = g.norm();
        if !(r > 0.0) {
            return Err(Error::InvalidInput("zero-length bond".into()));
        }
        let t = pair_terms_unchecked(r, p);
        pair += t.phi;
        rho += t.psi;
    }
    Ok(pair + embed(rho, p).0)
}

/// Site energy and `∂Φ/∂g_ρ` for every bond; `out` is overwritten.
pub fn site_gradient(p: &EamParams, bonds: &[Vector2<f64>], out: &mut Vec<Vector2<f64>>) -> Result<f64> {
    out.clear();
    let mut pair = 0.0;
    let mut rho = 0.0;
    // first pass: density, keep radial pair derivative in `out`
    let mut scratch = Vec::with_capacity(bonds.len());
    for g in bonds {
        let r = g.norm();
        if !(r > 0.0) {
            return Err(Error::InvalidInput("zero-length bond".into()));
        }
        let t = pair_terms_unchecked(r, p);
        pair += t.phi;
        rho += t.psi;
        scratch.push((r, t.dphi, t.dpsi));
    }
    let (f, df) = embed(rho, p);
    for (g, (r, dphi, dpsi)) in bonds.iter().zip(scratch) {
        out.push(g * ((dphi + df * dpsi) / r));
    }
    Ok(pair + f)
}

/// Cauchy–Born strain energy density of the homogeneous lattice.
#[derive(Clone, Debug)]
pub struct CauchyBorn {
    pub params: EamParams,
    /// Reference bond vectors of the homogeneous stencil.
    pub directions: Vec<Vector2<f64>>,
    /// Area per site.
    pub cell_area: f64,
}

impl CauchyBorn {
    pub fn new(params: EamParams) -> Self {
        Self::with_basis(params, &triangular_basis())
    }

    pub fn with_basis(params: EamParams, basis: &Matrix2<f64>) -> Self {
        let directions = lattice_directions(basis, params.r_cut)
            .into_iter()
            .map(|d| basis * Vector2::new(d[0] as f64, d[1] as f64))
            .collect();
        Self { params, directions, cell_area: basis.determinant().abs() }
    }

    /// Energy density `W(F)`.
    pub fn energy(&self, f: &Matrix2<f64>) -> Result<f64> {
        check_deformation(f)?;
        let bonds: Vec<_> = self.directions.iter().map(|r| f * r).collect();
        Ok(site_energy(&self.params, &bonds)? / self.cell_area)
    }

    /// `W(F)` and the first Piola stress `∂W(F)`.
    pub fn eval(&self, f: &Matrix2<f64>) -> Result<(f64, Matrix2<f64>)> {
        check_deformation(f)?;
        let bonds: Vec<_> = self.directions.iter().map(|r| f * r).collect();
        let mut v = Vec::with_capacity(bonds.len());
        let e = site_gradient(&self.params, &bonds, &mut v)?;
        let mut stress = Matrix2::zeros();
        for (vr, r) in v.iter().zip(&self.directions) {
            stress += vr * r.transpose();
        }
        Ok((e / self.cell_area, stress / self.cell_area))
    }

    /// Energy and stress without the determinant check; used in assembly
    /// loops where bond collapse is reported by the caller.
    pub(crate) fn eval_fast(&self, f: &Matrix2<f64>, bonds: &mut Vec<Vector2<f64>>, v: &mut Vec<Vector2<f64>>) -> Result<(f64, Matrix2<f64>)> {
        bonds.clear();
        bonds.extend(self.directions.iter().map(|r| f * r));
        let e = site_gradient(&self.params, bonds, v)?;
        let mut stress = Matrix2::zeros();
        for (vr, r) in v.iter().zip(&self.directions) {
            stress += vr * r.transpose();
        }
        Ok((e / self.cell_area, stress / self.cell_area))
    }
}

fn check_deformation(f: &Matrix2<f64>) -> Result<()> {
    let det = f.determinant();
    if !(det.abs() > 1e-14) {
        return Err(Error::InvalidInput(format!("deformation gradient is singular (det = {det})")));
    }
    Ok(())
}

/// `W(F)` and `∂W(F)` for the triangular lattice.
pub fn cb_eval(f: &Matrix2<f64>, p: &EamParams) -> Result<(f64, Matrix2<f64>)> {
    CauchyBorn::new(*p).eval(f)
}

/// Scale `t*` such that `t* I` minimises `t ↦ W(tI)`.
///
/// Bisects on the analytic derivative `dW/dt = ∂W(tI) : I` inside
/// `[0.8, 1.2]`; the minimum of the energy itself is flat to round-off long
/// before the derivative is.
pub fn equilibrium_scale(p: &EamParams) -> Result<f64> {
    p.validate()?;
    let cb = CauchyBorn::new(*p);
    let dwdt = |t: f64| -> Result<f64> {
        let (_, s) = cb.eval(&(Matrix2::identity() * t))?;
        Ok(s.trace())
    };
    let (mut lo, mut hi) = (0.8, 1.2);
    let (mut flo, fhi) = (dwdt(lo)?, dwdt(hi)?);
    if !(flo < 0.0 && fhi > 0.0) {
        return Err(Error::InvalidInput(format!(
            "no interior minimum of W(tI) in [{lo}, {hi}] (dW/dt = {flo}, {fhi})"
        )));
    }
    while hi - lo > 1e-15 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = dwdt(mid)?;
        if fm == 0.0 {
            return Ok(mid);
        }
        if (fm < 0.0) == (flo < 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    let t = 0.5 * (lo + hi);
    Ok(t)
}
