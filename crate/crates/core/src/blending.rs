//! Blending functions `β` between the atomistic core (`β = 0`) and the
//! continuum far field (`β = 1`).
//!
//! Distances are measured to the defect row, so `β = 0` on the
//! `r_a`-neighbourhood of the row and `β = 1` beyond `r_b`.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::femgrid::TriMesh;
use crate::lattice::{Coord, Lattice, HOPS};
use crate::precond::solve_spd;
use crate::{Error, Result};

/// Quintic smoothstep profile on `[r_a, r_b]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineProfile {
    pub r_a: f64,
    pub r_b: f64,
}

impl SplineProfile {
    pub fn new(r_a: f64, r_b: f64) -> Result<Self> {
        if !(r_b > r_a) || !(r_a >= 0.0) || !r_b.is_finite() {
            return Err(Error::InvalidInput(format!("blending radii must satisfy 0 <= r_a < r_b, got {r_a}, {r_b}")));
        }
        Ok(Self { r_a, r_b })
    }

    fn t(&self, r: f64) -> f64 {
        ((r - self.r_a) / (self.r_b - self.r_a)).clamp(0.0, 1.0)
    }

    pub fn value(&self, r: f64) -> f64 {
        let t = self.t(r);
        (t * t * t * (10.0 + t * (-15.0 + 6.0 * t))).clamp(0.0, 1.0)
    }

    pub fn derivative(&self, r: f64) -> f64 {
        let t = self.t(r);
        30.0 * t * t * (1.0 - t) * (1.0 - t) / (self.r_b - self.r_a)
    }

    pub fn second_derivative(&self, r: f64) -> f64 {
        let t = self.t(r);
        let w = self.r_b - self.r_a;
        60.0 * t * (1.0 - t) * (1.0 - 2.0 * t) / (w * w)
    }
}

/// Norms of a blending function.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BlendNorms {
    pub grad_inf: f64,
    pub hess_inf: f64,
    pub hess_l2: f64,
}

/// A blending function sampled at mesh nodes and lattice sites.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Blend {
    pub nodal: Vec<f64>,
    pub atom_values: Vec<f64>,
    /// Mean of the nodal values on each triangle.
    pub tri_values: Vec<f64>,
    pub profile: Option<SplineProfile>,
    pub norms: BlendNorms,
}

/// Rule for building `β`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendKind {
    Spline,
    Optimized,
}

impl Blend {
    /// Builds a blend from nodal values; sites that are not nodes take
    /// `far` (their value outside the mesh).
    pub fn from_nodal(mesh: &TriMesh, lat: &Lattice, nodal: Vec<f64>, far: impl Fn(usize) -> f64) -> Result<Self> {
        if nodal.len() != mesh.num_nodes() {
            return Err(Error::InvalidInput("nodal blend length does not match the mesh".into()));
        }
        if nodal.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::InvalidInput("blend values must lie in [0, 1]".into()));
        }
        let atom_values = (0..lat.len())
            .map(|a| mesh.node_at(lat.coord(a)).map_or_else(|| far(a), |n| nodal[n]))
            .collect();
        let tri_values = mesh.triangles().iter().map(|t| t.iter().map(|&n| nodal[n]).sum::<f64>() / 3.0).collect();
        let mut b = Self { nodal, atom_values, tri_values, profile: None, norms: BlendNorms::default() };
        b.norms = beta_norms(&b, mesh, lat.cell_area());
        Ok(b)
    }

    /// Constant blend, for limit checks.
    pub fn uniform(mesh: &TriMesh, lat: &Lattice, value: f64) -> Result<Self> {
        Self::from_nodal(mesh, lat, vec![value; mesh.num_nodes()], |_| value)
    }
}

/// Samples the quintic profile of the distance to the defect row.
pub fn spline_beta(mesh: &TriMesh, lat: &Lattice, r_a: f64, r_b: f64) -> Result<Blend> {
    let profile = SplineProfile::new(r_a, r_b)?;
    let nodal = mesh.nodes().iter().map(|x| profile.value(lat.core_distance(x))).collect();
    let mut b = Blend::from_nodal(mesh, lat, nodal, |a| profile.value(lat.core_distance(&lat.position(a))))?;
    b.profile = Some(profile);
    Ok(b)
}

/// Minimises the squared graph-Laplacian norm of `β` over nodes strictly
/// between `r_a` and `r_b`, with `β` fixed to 0 inside and 1 outside.
///
/// Falls back to [`spline_beta`] when the annulus is thinner than three
/// lattice spacings.
pub fn optimize_beta(mesh: &TriMesh, lat: &Lattice, r_a: f64, r_b: f64) -> Result<Blend> {
    let profile = SplineProfile::new(r_a, r_b)?;
    if r_b - r_a < 3.0 {
        return spline_beta(mesh, lat, r_a, r_b);
    }
    let n = mesh.num_nodes();
    let dist: Vec<f64> = mesh.nodes().iter().map(|x| lat.core_distance(x)).collect();
    let fixed: Vec<Option<f64>> = dist
        .iter()
        .map(|&d| if d <= r_a { Some(0.0) } else if d >= r_b { Some(1.0) } else { None })
        .collect();
    let neighbors = hop_neighbors(mesh);
    if (0..n).any(|k| fixed[k].is_none() && neighbors[k].is_none()) {
        return Err(Error::Mesh("blending annulus is not fully refined".into()));
    }
    let mut nodal = minimize_biharmonic(&neighbors, &fixed)?;
    for v in &mut nodal {
        *v = v.clamp(0.0, 1.0);
    }
    let far = |a: usize| profile.value(lat.core_distance(&lat.position(a)));
    Blend::from_nodal(mesh, lat, nodal, far)
}

/// Six hop neighbours of every fine node that has all of them.
fn hop_neighbors(mesh: &TriMesh) -> Vec<Option<Vec<usize>>> {
    (0..mesh.num_nodes())
        .map(|k| {
            let c = mesh.node_coord(k)?;
            HOPS.iter().map(|d| mesh.node_at([c[0] + d[0], c[1] + d[1]])).collect()
        })
        .collect()
}

/// Minimiser of `Σ_rows (Σ_{b ~ a} (x_b - x_a))^2` subject to the fixed
/// values, where rows are the vertices with a neighbour list.
pub(crate) fn minimize_biharmonic(neighbors: &[Option<Vec<usize>>], fixed: &[Option<f64>]) -> Result<Vec<f64>> {
    let n = fixed.len();
    let mut map = vec![usize::MAX; n];
    let mut m = 0;
    for k in 0..n {
        if fixed[k].is_none() {
            map[k] = m;
            m += 1;
        }
    }
    let mut entries = Vec::new();
    let mut rhs = vec![0.0; m];
    let mut free_terms: Vec<(usize, f64)> = Vec::new();
    for (a, nb) in neighbors.iter().enumerate() {
        let Some(nb) = nb else { continue };
        free_terms.clear();
        let mut constant = 0.0;
        let mut add = |k: usize, c: f64, free_terms: &mut Vec<(usize, f64)>| match fixed[k] {
            Some(v) => constant += c * v,
            None => free_terms.push((map[k], c)),
        };
        add(a, -(nb.len() as f64), &mut free_terms);
        for &b in nb {
            add(b, 1.0, &mut free_terms);
        }
        if free_terms.is_empty() {
            continue;
        }
        for &(i, ci) in &free_terms {
            rhs[i] -= ci * constant;
            for &(j, cj) in &free_terms {
                entries.push((i, j, ci * cj));
            }
        }
    }
    let x = if m > 0 { solve_spd(m, &entries, &rhs)? } else { Vec::new() };
    Ok((0..n).map(|k| fixed[k].unwrap_or_else(|| x[map[k]])).collect())
}

/// Discrete biharmonic objective `Σ (Δ_h β)^2` over fine nodes with full
/// neighbourhoods.
pub fn biharmonic_objective(b: &Blend, mesh: &TriMesh) -> f64 {
    hop_neighbors(mesh)
        .iter()
        .enumerate()
        .filter_map(|(a, nb)| nb.as_ref().map(|nb| (a, nb)))
        .map(|(a, nb)| {
            let l: f64 = nb.iter().map(|&k| b.nodal[k] - b.nodal[a]).sum();
            l * l
        })
        .sum()
}

/// `(‖∇β‖_∞, ‖∇²β‖_∞, ‖∇²β‖_{L²})`: the gradient from the P1 interpolant,
/// the Hessian at fine nodes from second differences along the three
/// lattice directions.
pub fn beta_norms(b: &Blend, mesh: &TriMesh, cell_area: f64) -> BlendNorms {
    let mut out = BlendNorms::default();
    for t in 0..mesh.num_triangles() {
        let g = mesh.basis_gradients(t);
        let grad: Vector2<f64> = mesh.triangles()[t].iter().zip(g).map(|(&n, gk)| gk * b.nodal[n]).sum();
        out.grad_inf = out.grad_inf.max(grad.norm());
    }
    // second differences along e1, e2, e2 - e1 recover the three Hessian entries
    let dirs: [Coord; 3] = [[1, 0], [0, 1], [-1, 1]];
    let mut sum = 0.0;
    let mut solve: Option<Matrix3<f64>> = None;
    for k in 0..mesh.num_nodes() {
        let Some(c) = mesh.node_coord(k) else { continue };
        let mut d2 = Vector3::zeros();
        let mut complete = true;
        for (r, d) in dirs.iter().enumerate() {
            match (mesh.node_at([c[0] + d[0], c[1] + d[1]]), mesh.node_at([c[0] - d[0], c[1] - d[1]])) {
                (Some(p), Some(q)) => d2[r] = b.nodal[p] - 2.0 * b.nodal[k] + b.nodal[q],
                _ => complete = false,
            }
        }
        if !complete {
            continue;
        }
        let inv = *solve.get_or_insert_with(|| {
            let v: Vec<Vector2<f64>> = dirs
                .iter()
                .map(|d| {
                    let p = mesh.node_at([c[0] + d[0], c[1] + d[1]]).unwrap();
                    mesh.nodes()[p] - mesh.nodes()[k]
                })
                .collect();
            let m = Matrix3::from_fn(|r, col| {
                let (x, y) = (v[r].x, v[r].y);
                [x * x, 2.0 * x * y, y * y][col]
            });
            m.try_inverse().expect("lattice directions span the plane")
        });
        let h = inv * d2;
        let norm2 = h[0] * h[0] + 2.0 * h[1] * h[1] + h[2] * h[2];
        out.hess_inf = out.hess_inf.max(norm2.sqrt());
        sum += norm2;
    }
    out.hess_l2 = (sum * cell_area).sqrt();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::femgrid::{build_graded_mesh, SizeField};
    use crate::lattice::{build_lattice, LatticeSpec, Region};

    fn setup(r_a: f64, r_b: f64, k: usize) -> (Lattice, TriMesh) {
        let sf = SizeField::new(r_a, r_b, (r_b + 8.0).max(r_a * r_a / 2.0).ceil(), 1.5).unwrap();
        let lat = build_lattice(&LatticeSpec::new(Region::Hexagon { layers: sf.refined_layers() }, k)).unwrap();
        let mesh = build_graded_mesh(&lat, &sf).unwrap();
        (lat, mesh)
    }

    #[test]
    fn spline_profile_values() {
        let p = SplineProfile::new(4.0, 10.0).unwrap();
        assert_eq!(p.value(3.0), 0.0);
        assert_eq!(p.value(11.0), 1.0);
        assert!((p.value(7.0) - 0.5).abs() < 1e-15);
        let mut last = 0.0;
        for k in 0..=600 {
            let v = p.value(4.0 + k as f64 * 0.01);
            assert!(v >= last);
            last = v;
        }
        // maximal slope 15/8 / W at the midpoint
        assert!((p.derivative(7.0) - 15.0 / 8.0 / 6.0).abs() < 1e-14);
        assert_eq!(p.derivative(4.0), 0.0);
        assert_eq!(p.second_derivative(10.0), 0.0);
        assert!(SplineProfile::new(4.0, 4.0).is_err());
    }

    #[test]
    fn spline_second_derivative_scaling() {
        let widths = [2.0, 4.0, 8.0];
        let maxima: Vec<f64> = widths
            .iter()
            .map(|&w| {
                let p = SplineProfile::new(5.0, 5.0 + w).unwrap();
                (0..=4000).map(|k| p.second_derivative(5.0 + w * k as f64 / 4000.0).abs()).fold(0.0, f64::max)
            })
            .collect();
        let slope = (maxima[2] / maxima[0]).ln() / (4f64).ln();
        assert!((slope + 2.0).abs() < 0.1, "{slope}");
    }

    #[test]
    fn spline_blend_support_and_gradient() {
        let (lat, mesh) = setup(8.0, 16.0, 2);
        let b = spline_beta(&mesh, &lat, 8.0, 16.0).unwrap();
        for (k, x) in mesh.nodes().iter().enumerate() {
            let d = lat.core_distance(x);
            if d <= 8.0 {
                assert_eq!(b.nodal[k], 0.0);
            }
            if d >= 16.0 {
                assert_eq!(b.nodal[k], 1.0);
            }
        }
        let expect = 15.0 / 8.0 / 8.0;
        assert!((b.norms.grad_inf - expect).abs() < 0.1 * expect, "{:?}", b.norms);
    }

    #[test]
    fn constant_blend_has_zero_norms() {
        let (lat, mesh) = setup(4.0, 8.0, 0);
        for v in [0.0, 1.0, 0.3] {
            let n = Blend::uniform(&mesh, &lat, v).unwrap().norms;
            assert!(n.grad_inf < 1e-14 && n.hess_inf < 1e-12 && n.hess_l2 < 1e-10, "{n:?}");
        }
    }

    #[test]
    fn optimized_beats_spline() {
        let (lat, mesh) = setup(6.0, 12.0, 2);
        let s = spline_beta(&mesh, &lat, 6.0, 12.0).unwrap();
        let o = optimize_beta(&mesh, &lat, 6.0, 12.0).unwrap();
        assert!(biharmonic_objective(&o, &mesh) <= biharmonic_objective(&s, &mesh));
        for (k, x) in mesh.nodes().iter().enumerate() {
            let d = lat.core_distance(x);
            assert!((0.0..=1.0).contains(&o.nodal[k]));
            if d <= 6.0 {
                assert_eq!(o.nodal[k], 0.0);
            }
            if d >= 12.0 {
                assert_eq!(o.nodal[k], 1.0);
            }
        }
    }

    #[test]
    fn thin_annulus_falls_back_to_spline() {
        let (lat, mesh) = setup(6.0, 8.0, 0);
        let o = optimize_beta(&mesh, &lat, 6.0, 8.0).unwrap();
        assert!(o.profile.is_some());
    }

    #[test]
    fn one_dimensional_restriction_is_a_cubic() {
        // path graph on sites -2..=n+2; 0 up to index 0, 1 from index n on
        let n = 7i64;
        let sites: Vec<i64> = (-2..=n + 2).collect();
        let idx = |s: i64| (s + 2) as usize;
        let neighbors: Vec<Option<Vec<usize>>> = sites
            .iter()
            .map(|&s| if s > -2 && s < n + 2 { Some(vec![idx(s - 1), idx(s + 1)]) } else { None })
            .collect();
        let fixed: Vec<Option<f64>> =
            sites.iter().map(|&s| if s <= 0 { Some(0.0) } else if s >= n { Some(1.0) } else { None }).collect();
        let x = minimize_biharmonic(&neighbors, &fixed).unwrap();
        // cubic through (-1,0), (0,0), (n,1), (n+1,1): p(s) = s (s + 1) (a s + c)
        let nf = n as f64;
        // p(n) = 1, p(n+1) = 1
        let m = nalgebra::Matrix2::new(nf * nf * (nf + 1.0), nf * (nf + 1.0), (nf + 1.0) * (nf + 1.0) * (nf + 2.0), (nf + 1.0) * (nf + 2.0));
        let coef = m.try_inverse().unwrap() * Vector2::new(1.0, 1.0);
        for &s in &sites[2..sites.len() - 2] {
            let sf = s as f64;
            let p = sf * (sf + 1.0) * (coef.x * sf + coef.y);
            assert!((x[idx(s)] - p).abs() < 1e-10, "s={s}: {} vs {p}", x[idx(s)]);
        }
    }

    #[test]
    fn hessian_norm_scaling() {
        // ‖∇²β‖²_{L²} ~ r_b (r_b - r_a)^{-3} in 2D
        let widths = [4.0, 8.0, 16.0];
        let r_b = 40.0;
        let vals: Vec<f64> = widths
            .iter()
            .map(|&w| {
                let (lat, mesh) = setup(r_b - w, r_b, 0);
                spline_beta(&mesh, &lat, r_b - w, r_b).unwrap().norms.hess_l2.powi(2)
            })
            .collect();
        let slope = (vals[2] / vals[0]).ln() / 4f64.ln();
        assert!((slope + 3.0).abs() < 0.3, "{slope} {vals:?}");
    }
}
