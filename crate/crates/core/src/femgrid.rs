//! Graded P1 triangulations around a defect row.
//!
//! The mesh is fully refined (every lattice site a node) out to a number of
//! hop layers around the defect row, then coarsened by concentric hexagonal
//! rings whose node spacing follows a size field. All nodes sit on lattice
//! sites, so each ring is an exact level set of the hop distance to the row.

use std::collections::HashMap;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::atomistic::Displacement;
use crate::lattice::{row_distance, Coord, Lattice};
use crate::{Error, Result};

/// Radii and grading of a coupled mesh.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeField {
    pub r_a: f64,
    pub r_b: f64,
    /// Outer radius, in hop layers from the defect row.
    pub r_c: f64,
    pub exponent: f64,
    /// Extra fully refined width beyond `r_b` (twice the cutoff).
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_margin() -> f64 {
    4.0
}

/// Shape-regularity bound `h_T^2 / |T|`.
pub const MAX_SHAPE_RATIO: f64 = 12.0;

impl SizeField {
    pub fn new(r_a: f64, r_b: f64, r_c: f64, exponent: f64) -> Result<Self> {
        let sf = Self { r_a, r_b, r_c, exponent, margin: default_margin() };
        sf.validate()?;
        Ok(sf)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.r_a > 0.0
            && self.r_a <= self.r_b
            && self.r_b <= self.r_c
            && self.exponent >= 0.0
            && self.margin >= 0.0
            && [self.r_a, self.r_b, self.r_c, self.exponent, self.margin].iter().all(|x| x.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid size field {self:?}")))
        }
    }

    /// Target edge length `max(1, (r / r_a)^exponent)`.
    pub fn h(&self, r: f64) -> f64 {
        (r / self.r_a).powf(self.exponent).max(1.0)
    }

    /// Hop layers that contain the Euclidean `r_b + margin` neighbourhood
    /// of the row.
    pub fn refined_layers(&self) -> u32 {
        ((self.r_b + self.margin) * 2.0 / 3f64.sqrt() - 1e-9).ceil().max(1.0) as u32
    }

    pub fn outer_layers(&self) -> u32 {
        (self.r_c - 1e-9).ceil().max(1.0) as u32
    }
}

/// Build-time quality measures.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeshMetrics {
    pub nodes: usize,
    pub triangles: usize,
    pub max_shape_ratio: f64,
    pub max_h: f64,
    /// `max_T h_T / max(1, |x_T| / r_a)^exponent`.
    pub max_size_ratio: f64,
}

/// Conforming P1 triangulation.
#[derive(Clone, Debug)]
pub struct TriMesh {
    nodes: Vec<Vector2<f64>>,
    triangles: Vec<[usize; 3]>,
    atom_of_node: Vec<Option<usize>>,
    h_max_per_tri: Vec<f64>,
    area: Vec<f64>,
    grad_basis: Vec<[Vector2<f64>; 3]>,
    boundary: Vec<bool>,
    grid: Option<RingGrid>,
    metrics: MeshMetrics,
}

/// Lattice structure of a graded mesh, used for point location.
#[derive(Clone, Debug)]
struct RingGrid {
    basis_inv: Matrix2<f64>,
    row: [i64; 2],
    coords: Vec<Coord>,
    node_index: HashMap<Coord, usize>,
    fine_layers: u32,
    /// Ring radii, starting with `fine_layers`.
    rings: Vec<u32>,
    /// Triangle range of each annulus `rings[k]..rings[k+1]`.
    annulus_tris: Vec<std::ops::Range<usize>>,
}

/// Serializable mesh export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshDump {
    pub nodes: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub atom_of_node: Vec<Option<usize>>,
    pub boundary: Vec<bool>,
    pub metrics: MeshMetrics,
}

fn signed_area(a: &Vector2<f64>, b: &Vector2<f64>, c: &Vector2<f64>) -> f64 {
    0.5 * ((b - a).perp(&(c - a)))
}

/// Hop norm of a real coordinate vector.
fn hop_norm_real(a: f64, b: f64) -> f64 {
    a.abs().max(b.abs()).max((a + b).abs())
}

/// Real-valued hop distance of lattice coordinates `(xi, eta)` from the row.
pub fn row_distance_real(row: [i64; 2], xi: f64, eta: f64) -> f64 {
    let (lo, hi) = (row[0] as f64, row[1] as f64);
    [lo, hi, xi, xi + eta, xi + 0.5 * eta]
        .iter()
        .map(|p| p.clamp(lo, hi))
        .map(|p| hop_norm_real(xi - p, eta))
        .fold(f64::INFINITY, f64::min)
}

impl TriMesh {
    /// Mesh from explicit nodes and triangles, without lattice structure.
    /// Triangles must be positively oriented.
    pub fn new(nodes: Vec<Vector2<f64>>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let n = nodes.len();
        let boundary = vec![false; n];
        Self::assemble(nodes, triangles, vec![None; n], boundary, None, None)
    }

    fn assemble(
        nodes: Vec<Vector2<f64>>,
        triangles: Vec<[usize; 3]>,
        atom_of_node: Vec<Option<usize>>,
        boundary: Vec<bool>,
        grid: Option<RingGrid>,
        sf: Option<&SizeField>,
    ) -> Result<Self> {
        let mut area = Vec::with_capacity(triangles.len());
        let mut grad_basis = Vec::with_capacity(triangles.len());
        let mut h_max_per_tri = Vec::with_capacity(triangles.len());
        let mut metrics = MeshMetrics { nodes: nodes.len(), triangles: triangles.len(), ..Default::default() };
        let mut worst = 0;
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&k| k >= nodes.len()) {
                return Err(Error::Mesh(format!("triangle {t} references a missing node")));
            }
            let [p0, p1, p2] = tri.map(|k| nodes[k]);
            let a = signed_area(&p0, &p1, &p2);
            if !(a > 0.0) {
                return Err(Error::Mesh(format!("triangle {t} is degenerate or inverted (area {a})")));
            }
            // gradients of the barycentric coordinates
            let rot = |v: Vector2<f64>| Vector2::new(-v.y, v.x);
            let g = [rot(p2 - p1) / (2.0 * a), rot(p0 - p2) / (2.0 * a), rot(p1 - p0) / (2.0 * a)];
            let h = (p1 - p0).norm().max((p2 - p1).norm()).max((p0 - p2).norm());
            if h * h / a > metrics.max_shape_ratio {
                metrics.max_shape_ratio = h * h / a;
                worst = t;
            }
            metrics.max_h = metrics.max_h.max(h);
            if let Some(sf) = sf {
                let r = ((p0 + p1 + p2) / 3.0).norm();
                metrics.max_size_ratio = metrics.max_size_ratio.max(h / sf.h(r));
            }
            area.push(a);
            grad_basis.push(g);
            h_max_per_tri.push(h);
        }
        if metrics.max_shape_ratio > MAX_SHAPE_RATIO {
            return Err(Error::Mesh(format!(
                "shape regularity violated: max h^2/|T| = {:.3} at triangle {:?}",
                metrics.max_shape_ratio,
                triangles[worst].map(|k| (nodes[k].x, nodes[k].y))
            )));
        }
        Ok(Self { nodes, triangles, atom_of_node, h_max_per_tri, area, grad_basis, boundary, grid, metrics })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn nodes(&self) -> &[Vector2<f64>] {
        &self.nodes
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn atom_of_node(&self) -> &[Option<usize>] {
        &self.atom_of_node
    }

    pub fn h_max_per_tri(&self) -> &[f64] {
        &self.h_max_per_tri
    }

    pub fn areas(&self) -> &[f64] {
        &self.area
    }

    /// Gradients of the three barycentric coordinates of triangle `t`.
    pub fn basis_gradients(&self, t: usize) -> &[Vector2<f64>; 3] {
        &self.grad_basis[t]
    }

    /// Nodes on the outer boundary (clamped in coupled problems).
    pub fn boundary(&self) -> &[bool] {
        &self.boundary
    }

    pub fn metrics(&self) -> &MeshMetrics {
        &self.metrics
    }

    pub fn total_area(&self) -> f64 {
        self.area.iter().sum()
    }

    pub fn barycenter(&self, t: usize) -> Vector2<f64> {
        let [a, b, c] = self.triangles[t];
        (self.nodes[a] + self.nodes[b] + self.nodes[c]) / 3.0
    }

    /// Lattice coordinates of node `n`, for lattice-built meshes.
    pub fn node_coord(&self, n: usize) -> Option<Coord> {
        self.grid.as_ref().map(|g| g.coords[n])
    }

    /// Node at lattice coordinate `c`, for lattice-built meshes.
    pub fn node_at(&self, c: Coord) -> Option<usize> {
        self.grid.as_ref().and_then(|g| g.node_index.get(&c).copied())
    }

    /// Number of fully refined hop layers.
    pub fn fine_layers(&self) -> Option<u32> {
        self.grid.as_ref().map(|g| g.fine_layers)
    }

    /// Outer radius in hop layers.
    pub fn outer_layers(&self) -> Option<u32> {
        self.grid.as_ref().and_then(|g| g.rings.last().copied())
    }

    pub fn dump(&self) -> MeshDump {
        MeshDump {
            nodes: self.nodes.iter().map(|p| [p.x, p.y]).collect(),
            triangles: self.triangles.clone(),
            atom_of_node: self.atom_of_node.clone(),
            boundary: self.boundary.clone(),
            metrics: self.metrics,
        }
    }

    /// Gradient of the P1 interpolant of `nodal` on triangle `t`.
    #[inline]
    pub fn tri_gradient(&self, t: usize, nodal: &[[f64; 2]]) -> Matrix2<f64> {
        let g = &self.grad_basis[t];
        let mut m = Matrix2::zeros();
        for (k, &n) in self.triangles[t].iter().enumerate() {
            let u = nodal[n];
            m[(0, 0)] += u[0] * g[k].x;
            m[(0, 1)] += u[0] * g[k].y;
            m[(1, 0)] += u[1] * g[k].x;
            m[(1, 1)] += u[1] * g[k].y;
        }
        m
    }

    /// Barycentric coordinates of `x` in triangle `t`.
    fn barycentric(&self, t: usize, x: &Vector2<f64>) -> [f64; 3] {
        let [a, b, c] = self.triangles[t].map(|k| self.nodes[k]);
        let s = 2.0 * self.area[t];
        [
            (b - x).perp(&(c - x)) / s,
            (c - x).perp(&(a - x)) / s,
            (a - x).perp(&(b - x)) / s,
        ]
    }

    fn try_in(&self, t: usize, x: &Vector2<f64>) -> Option<([usize; 3], [f64; 3])> {
        let l = self.barycentric(t, x);
        const TOL: f64 = -1e-10;
        if l.iter().all(|&v| v >= TOL) {
            Some((self.triangles[t], l))
        } else {
            None
        }
    }

    /// Triangle vertices and barycentric weights of the point `x`, or
    /// `None` outside the mesh.
    pub fn locate(&self, x: &Vector2<f64>) -> Option<([usize; 3], [f64; 3])> {
        let Some(g) = &self.grid else {
            return (0..self.triangles.len()).find_map(|t| self.try_in(t, x));
        };
        let c = g.basis_inv * x;
        let d = row_distance_real(g.row, c.x, c.y);
        let outer = *g.rings.last().expect("rings non-empty") as f64;
        if d > outer + 1e-9 {
            return None;
        }
        if d <= g.fine_layers as f64 + 1e-9 {
            let (i, j) = (c.x.floor() as i64, c.y.floor() as i64);
            let (fx, fy) = (c.x - i as f64, c.y - j as f64);
            let tri = if fx + fy <= 1.0 {
                [[i, j], [i + 1, j], [i, j + 1]]
            } else {
                [[i + 1, j], [i + 1, j + 1], [i, j + 1]]
            };
            if let Some(ns) = tri.iter().map(|c| g.node_index.get(c).copied()).collect::<Option<Vec<_>>>() {
                let [a, b, cc] = [ns[0], ns[1], ns[2]];
                let s = 2.0 * signed_area(&self.nodes[a], &self.nodes[b], &self.nodes[cc]);
                let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[cc]);
                let l = [(pb - x).perp(&(pc - x)) / s, (pc - x).perp(&(pa - x)) / s, (pa - x).perp(&(pb - x)) / s];
                return Some(([a, b, cc], l));
            }
        }
        // annuli whose closed range contains d
        for (k, w) in g.rings.windows(2).enumerate() {
            if d >= w[0] as f64 - 1e-9 && d <= w[1] as f64 + 1e-9 {
                if let Some(hit) = g.annulus_tris[k].clone().find_map(|t| self.try_in(t, x)) {
                    return Some(hit);
                }
            }
        }
        None
    }
}

/// Nodes of the hexagonal ring at `n` hops from `row`, counter-clockwise,
/// split by side; each side lists both of its corners.
fn ring_sides(row: [i64; 2], n: i64, h: f64) -> [Vec<Coord>; 6] {
    let (s0, s1) = (row[0], row[1]);
    let w = s1 - s0;
    let corners = [[s1 + n, 0], [s1, n], [s0 - n, n], [s0 - n, 0], [s0, -n], [s1 + n, -n]];
    let dirs = [[-1, 1], [-1, 0], [0, -1], [1, -1], [1, 0], [0, 1]];
    let lens = [n, w + n, n, n, w + n, n];
    std::array::from_fn(|k| {
        let len = lens[k];
        let m = ((len as f64 / h).round() as i64).clamp(1, len.max(1));
        (0..=m)
            .map(|t| {
                let s = ((t * len) as f64 / m as f64).round() as i64;
                [corners[k][0] + s * dirs[k][0], corners[k][1] + s * dirs[k][1]]
            })
            .collect()
    })
}

/// Builds the graded mesh around the defect row of `lat`.
///
/// Nodes within [`SizeField::refined_layers`] hop layers (capped at the
/// outer radius) cover every lattice site. Beyond, each ring lies one
/// node spacing `s_k` outside the previous one and has its sides split
/// into segments of length about `s_{k+1} = clamp(round(h), s_k, 2 s_k)`;
/// the last ring snaps to the outer radius.
pub fn build_graded_mesh(lat: &Lattice, sf: &SizeField) -> Result<TriMesh> {
    sf.validate()?;
    let row = lat.defect_row();
    let outer = sf.outer_layers();
    let fine = sf.refined_layers().min(outer);
    let basis = *lat.basis();
    let basis_inv = basis.try_inverse().ok_or_else(|| Error::Mesh("singular lattice basis".into()))?;

    let mut coords: Vec<Coord> = Vec::new();
    let mut node_index: HashMap<Coord, usize> = HashMap::new();
    let f = fine as i64;
    for j in -f..=f {
        for i in row[0] - f..=row[1] + f {
            if row_distance(row, [i, j]) <= f {
                node_index.insert([i, j], coords.len());
                coords.push([i, j]);
            }
        }
    }
    let mut triangles: Vec<[usize; 3]> = Vec::new();
    for &[i, j] in &coords {
        let at = |c: Coord| node_index.get(&c).copied();
        if let (Some(a), Some(b), Some(c)) = (at([i, j]), at([i + 1, j]), at([i, j + 1])) {
            triangles.push([a, b, c]);
        }
        if let (Some(a), Some(b), Some(c)) = (at([i, j]), at([i, j + 1]), at([i - 1, j + 1])) {
            triangles.push([a, b, c]);
        }
    }
    let mut rings = vec![fine];
    let mut annulus_tris = Vec::new();
    let mut prev: [Vec<usize>; 6] = ring_sides(row, f, 1.0).map(|side| side.iter().map(|c| node_index[c]).collect());
    let mut pos: Vec<Vector2<f64>> = coords.iter().map(|c| lat.to_position(*c)).collect();
    let mut n = fine;
    // spacing of the current ring; grows by at most a factor two per ring
    let mut spacing = 1u32;
    while n < outer {
        let mut next = n + spacing;
        let target = sf.h(next as f64).round().max(1.0) as u32;
        let mut next_spacing = target.clamp(spacing, 2 * spacing);
        if next >= outer || outer - next < next_spacing.div_ceil(2) {
            next = outer;
            // a thin last annulus cannot absorb a spacing jump
            next_spacing = next_spacing.min(spacing.max(2 * (next - n)));
        }
        let h = next_spacing as f64;
        let sides = ring_sides(row, next as i64, h);
        let mut ids: [Vec<usize>; 6] = Default::default();
        for (k, side) in sides.iter().enumerate() {
            for c in side {
                let id = *node_index.entry(*c).or_insert_with(|| {
                    coords.push(*c);
                    coords.len() - 1
                });
                ids[k].push(id);
            }
        }
        let start = triangles.len();
        pos.extend(coords[pos.len()..].iter().map(|c| lat.to_position(*c)));
        for k in 0..6 {
            stitch(&prev[k], &ids[k], &pos, &mut triangles);
        }
        annulus_tris.push(start..triangles.len());
        if ids.iter().map(|s| s.len() - 1).sum::<usize>() < 6 {
            return Err(Error::Mesh(format!("ring at {next} layers has fewer than 6 nodes")));
        }
        rings.push(next);
        prev = ids;
        n = next;
        spacing = next_spacing;
    }
    pos.extend(coords[pos.len()..].iter().map(|c| lat.to_position(*c)));
    let nodes = pos;
    let atom_of_node = coords.iter().map(|c| lat.index_of(*c)).collect();
    let boundary = coords.iter().map(|c| row_distance(row, *c) >= outer as i64).collect();
    let grid = RingGrid { basis_inv, row, coords, node_index, fine_layers: fine, rings, annulus_tris };
    TriMesh::assemble(nodes, triangles, atom_of_node, boundary, Some(grid), Some(sf))
}

/// Triangulates the strip between an inner and an outer polyline running in
/// the same (counter-clockwise) direction, greedily taking the shorter of
/// the two candidate diagonals.
fn stitch(inner: &[usize], outer: &[usize], pos: &[Vector2<f64>], out: &mut Vec<[usize; 3]>) {
    let (mp, mq) = (inner.len() - 1, outer.len() - 1);
    let (mut i, mut j) = (0, 0);
    while i < mp || j < mq {
        let advance_inner = j == mq
            || (i < mp
                && (pos[inner[i + 1]] - pos[outer[j]]).norm_squared()
                    <= (pos[inner[i]] - pos[outer[j + 1]]).norm_squared());
        if advance_inner {
            out.push([inner[i], outer[j], inner[i + 1]]);
            i += 1;
        } else {
            out.push([inner[i], outer[j], outer[j + 1]]);
            j += 1;
        }
    }
}

/// `Σ_T |T| f(x_T)` with `x_T` the barycenter of `T`.
pub fn midpoint_quadrature<F: Fn(&Vector2<f64>) -> f64>(mesh: &TriMesh, f: F) -> f64 {
    (0..mesh.num_triangles()).map(|t| mesh.area[t] * f(&mesh.barycenter(t))).sum()
}

/// Per-triangle gradients of the P1 interpolant of `nodal`.
pub fn p1_gradient(mesh: &TriMesh, nodal: &[[f64; 2]]) -> Result<Vec<Matrix2<f64>>> {
    if nodal.len() != mesh.num_nodes() {
        return Err(Error::InvalidInput(format!(
            "nodal field has {} entries, mesh has {} nodes",
            nodal.len(),
            mesh.num_nodes()
        )));
    }
    Ok((0..mesh.num_triangles()).map(|t| mesh.tri_gradient(t, nodal)).collect())
}

/// Scalar P1 stiffness matrix entries `∫ ∇φ_i · ∇φ_j` (duplicates not summed).
pub fn stiffness_triplets(mesh: &TriMesh) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::with_capacity(9 * mesh.num_triangles());
    for t in 0..mesh.num_triangles() {
        let g = &mesh.grad_basis[t];
        let tri = mesh.triangles[t];
        for a in 0..3 {
            for b in 0..3 {
                out.push((tri[a], tri[b], mesh.area[t] * g[a].dot(&g[b])));
            }
        }
    }
    out
}

/// Evaluates the P1 field `u_h` at every site of `lat`; sites outside the
/// mesh get zero.
pub fn transfer(mesh: &TriMesh, u_h: &[[f64; 2]], lat: &Lattice) -> Result<Displacement> {
    transfer_where(mesh, u_h, lat, |_| true)
}

/// As [`transfer`], evaluating only sites with `keep(coord)` (others zero).
pub fn transfer_where<K: Fn(Coord) -> bool>(mesh: &TriMesh, u_h: &[[f64; 2]], lat: &Lattice, keep: K) -> Result<Displacement> {
    if u_h.len() != mesh.num_nodes() {
        return Err(Error::InvalidInput("nodal field length does not match the mesh".into()));
    }
    let mut out = Displacement::zeros(lat.len());
    for a in 0..lat.len() {
        let c = lat.coord(a);
        if !keep(c) {
            continue;
        }
        if let Some(n) = mesh.node_at(c) {
            out.values[a] = u_h[n];
            continue;
        }
        if let Some((tri, l)) = mesh.locate(&lat.position(a)) {
            let mut v = [0.0; 2];
            for (n, w) in tri.iter().zip(l) {
                v[0] += w * u_h[*n][0];
                v[1] += w * u_h[*n][1];
            }
            out.values[a] = v;
        }
    }
    Ok(out)
}

/// Triangles of the canonical micro-triangulation of a lattice: each site
/// `(i, j)` anchors `{(i,j), (i+1,j), (i,j+1)}` and
/// `{(i,j), (i,j+1), (i-1,j+1)}` when all vertices are present.
pub fn micro_triangles<K: Fn(Coord) -> bool>(lat: &Lattice, keep: K) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for a in 0..lat.len() {
        let [i, j] = lat.coord(a);
        for tri in [[[i, j], [i + 1, j], [i, j + 1]], [[i, j], [i, j + 1], [i - 1, j + 1]]] {
            if !tri.iter().all(|c| keep(*c)) {
                continue;
            }
            if let (Some(p), Some(q), Some(r)) = (lat.index_of(tri[0]), lat.index_of(tri[1]), lat.index_of(tri[2])) {
                out.push([p, q, r]);
            }
        }
    }
    out
}

/// P1 interpolant on the micro-triangulation.
#[derive(Clone, Debug)]
pub struct MicroInterpolant {
    pub triangles: Vec<[usize; 3]>,
    pub gradients: Vec<Matrix2<f64>>,
    /// Area of every micro-triangle.
    pub triangle_area: f64,
}

impl MicroInterpolant {
    /// `‖∇ū‖_{L²}`.
    pub fn seminorm(&self) -> f64 {
        (self.gradients.iter().map(|g| g.norm_squared()).sum::<f64>() * self.triangle_area).sqrt()
    }
}

/// Gradient of the micro-interpolant on each of `tris`.
pub fn micro_gradients(lat: &Lattice, tris: &[[usize; 3]], u: &[[f64; 2]]) -> Vec<Matrix2<f64>> {
    let inv = lat.basis().try_inverse().expect("lattice basis is non-singular");
    tris.iter()
        .map(|&[p, q, r]| {
            // columns: derivatives along the two triangle edges in lattice coordinates
            let (cp, cq, cr) = (lat.coord(p), lat.coord(q), lat.coord(r));
            let up = cq[1] == cp[1];
            let (d1, d2) = if up {
                (sub(u[q], u[p]), sub(u[r], u[p]))
            } else {
                // (i,j), (i,j+1), (i-1,j+1)
                debug_assert_eq!(cq[0], cp[0]);
                debug_assert_eq!(cr[1], cq[1]);
                (sub(u[q], u[r]), sub(u[q], u[p]))
            };
            Matrix2::new(d1[0], d2[0], d1[1], d2[1]) * inv
        })
        .collect()
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

/// Micro-interpolant of `u` on every complete cell of `lat`.
pub fn micro_interpolant(lat: &Lattice, u: &Displacement) -> Result<MicroInterpolant> {
    if u.len() != lat.len() {
        return Err(Error::InvalidInput("displacement length does not match the lattice".into()));
    }
    let triangles = micro_triangles(lat, |_| true);
    let gradients = micro_gradients(lat, &triangles, &u.values);
    Ok(MicroInterpolant { triangles, gradients, triangle_area: 0.5 * lat.cell_area() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_lattice, LatticeSpec, Region};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hexlat(layers: u32, k: usize) -> Lattice {
        build_lattice(&LatticeSpec::new(Region::Hexagon { layers }, k)).unwrap()
    }

    fn graded(r_a: f64, k: usize) -> (Lattice, TriMesh) {
        let r_b = r_a + r_a.cbrt().ceil();
        let sf = SizeField::new(r_a, r_b, (r_a * r_a / 2.0).ceil(), 1.5).unwrap();
        let lat = hexlat(sf.refined_layers(), k);
        let m = build_graded_mesh(&lat, &sf).unwrap();
        (lat, m)
    }

    #[test]
    fn no_coarsening_gives_micro_triangulation() {
        let k = 6;
        let lat = hexlat(k, 0);
        let sf = SizeField::new(k as f64, k as f64, k as f64, 1.5).unwrap();
        let m = build_graded_mesh(&lat, &sf).unwrap();
        assert_eq!(m.num_nodes(), lat.len());
        assert_eq!(m.num_triangles(), micro_triangles(&lat, |_| true).len());
        assert_eq!(m.num_triangles(), 6 * (k * k) as usize);
        assert!(m.atom_of_node().iter().all(|a| a.is_some()));
        let area: f64 = m.total_area();
        assert!((area - 6.0 * (k * k) as f64 * lat.cell_area() / 2.0).abs() < 1e-9);
    }

    #[test]
    fn graded_mesh_is_conforming_and_covers_hexagon() {
        for k in [0, 2, 11] {
            let (lat, m) = graded(8.0, k);
            let outer = m.outer_layers().unwrap() as f64;
            let w = (lat.defect_row()[1] - lat.defect_row()[0]) as f64;
            // area of the elongated hexagon with n layers: (3 n^2 + 2 n w) cells... in cell units
            let expect = (3.0 * outer * outer + 2.0 * outer * w) * lat.cell_area();
            assert!((m.total_area() - expect).abs() < 1e-8 * expect, "k={k}");
            // conformity: every interior edge shared by exactly two triangles
            let mut edges: HashMap<(usize, usize), i32> = HashMap::new();
            for t in m.triangles() {
                for e in 0..3 {
                    let (a, b) = (t[e], t[(e + 1) % 3]);
                    *edges.entry((a.min(b), a.max(b))).or_default() += 1;
                }
            }
            for ((a, b), count) in edges {
                let on_boundary = m.boundary()[a] && m.boundary()[b];
                assert!(count == 2 || (count == 1 && on_boundary), "edge ({a},{b}) count {count}");
            }
        }
    }

    #[test]
    fn core_nodes_are_atoms() {
        let (lat, m) = graded(8.0, 2);
        let rb = 8.0 + 2.0;
        for a in 0..lat.len() {
            if lat.core_distance(&lat.position(a)) <= rb {
                let n = m.node_at(lat.coord(a)).unwrap();
                assert_eq!(m.atom_of_node()[n], Some(a));
            }
        }
        for t in 0..m.num_triangles() {
            if m.barycenter(t).norm() <= rb - 2.0 {
                for &n in &m.triangles()[t] {
                    let c = m.node_coord(n).unwrap();
                    assert!(m.atom_of_node()[n].is_some() || lat.is_removed(c));
                }
            }
        }
    }

    #[test]
    fn node_count_growth() {
        let count = |r: f64| graded(r, 2).1.num_nodes() as f64;
        let small: Vec<f64> = [8.0, 16.0, 32.0].iter().map(|&r| count(r)).collect();
        assert!(small.windows(2).all(|w| w[1] > 2.5 * w[0]), "{small:?}");
        // the fixed refinement margin dominates small sizes; the asymptotic
        // exponent shows from 32 on
        let large: Vec<f64> = [32.0, 64.0, 128.0].iter().map(|&r| count(r)).collect();
        let slope = (large[2] / large[0]).ln() / 4f64.ln();
        assert!((1.8..=2.4).contains(&slope), "growth exponent {slope}, counts {large:?}");
    }

    #[test]
    fn size_bound_holds() {
        let (_, m) = graded(16.0, 2);
        let mt = m.metrics();
        assert!(mt.max_size_ratio <= 3.0, "{mt:?}");
        assert!(mt.max_shape_ratio <= MAX_SHAPE_RATIO);
    }

    #[test]
    fn shape_bound_over_parameter_sweep() {
        for k in [0usize, 2, 11] {
            for r_a in [2.0, 3.0, 4.0, 6.0, 9.0] {
                for width in [0.0, 1.0, 2.0, 3.0, 5.0] {
                    for r_c in [r_a + width, r_a + width + 1.0, r_a + width + 7.0, 2.0 * (r_a + width) + 3.0, 60.0] {
                        let sf = SizeField::new(r_a, r_a + width, r_c.max(r_a + width), 1.5).unwrap();
                        let layers = sf.refined_layers().min(sf.outer_layers());
                        let lat = build_lattice(&LatticeSpec::new(Region::Hexagon { layers }, k)).unwrap();
                        let m = build_graded_mesh(&lat, &sf).unwrap_or_else(|e| panic!("{sf:?} k={k}: {e}"));
                        assert!(m.metrics().max_shape_ratio <= MAX_SHAPE_RATIO);
                    }
                }
            }
        }
    }

    #[test]
    fn invalid_size_field() {
        assert!(SizeField::new(4.0, 3.0, 8.0, 1.5).is_err());
        assert!(SizeField::new(0.0, 3.0, 8.0, 1.5).is_err());
        assert!(SizeField::new(4.0, 6.0, 5.0, 1.5).is_err());
    }

    #[test]
    fn quadrature_exact_for_affine() {
        let (_, m) = graded(8.0, 0);
        let area = m.total_area();
        assert!((midpoint_quadrature(&m, |_| 1.0) - area).abs() < 1e-9);
        // the elongated hexagon is point symmetric about the row centre: ∫x = ∫y = 0
        let ix = midpoint_quadrature(&m, |x| 2.0 + 3.0 * x.x - x.y);
        assert!((ix - 2.0 * area).abs() < 1e-8 * area);
    }

    #[test]
    fn quadrature_on_right_triangle() {
        let m = TriMesh::new(
            vec![Vector2::new(0.0, 0.0), Vector2::new(1.0, 0.0), Vector2::new(0.0, 1.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        // ∫ x² + y² over the unit right triangle = 1/6; midpoint gives (1/2)(2/9) = 1/9
        let q = midpoint_quadrature(&m, |x| x.norm_squared());
        assert!((q - 1.0 / 9.0).abs() < 1e-15);
        assert!((1.0 / 6.0 - q - 1.0 / 18.0).abs() < 1e-15);
    }

    #[test]
    fn inverted_triangle_rejected() {
        let r = TriMesh::new(
            vec![Vector2::new(0.0, 0.0), Vector2::new(1.0, 0.0), Vector2::new(0.0, 1.0)],
            vec![[0, 2, 1]],
        );
        assert!(r.is_err());
    }

    #[test]
    fn p1_gradient_reproduces_affine() {
        let (_, m) = graded(8.0, 2);
        let g = Matrix2::new(0.1, -0.2, 0.3, 0.05);
        let nodal: Vec<[f64; 2]> = m.nodes().iter().map(|x| {
            let v = g * x + Vector2::new(1.0, 2.0);
            [v.x, v.y]
        }).collect();
        for gt in p1_gradient(&m, &nodal).unwrap() {
            assert!((gt - g).norm() < 1e-10);
        }
        let c = vec![[0.7, -0.3]; m.num_nodes()];
        assert!(p1_gradient(&m, &c).unwrap().iter().all(|gt| gt.norm() < 1e-12));
    }

    #[test]
    fn p1_gradient_plane_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<Vector2<f64>> = vec![Vector2::new(0.1, 0.2), Vector2::new(1.3, -0.1), Vector2::new(0.4, 0.9)];
        let m = TriMesh::new(p.clone(), vec![[0, 1, 2]]).unwrap();
        let u: Vec<[f64; 2]> = (0..3).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
        let g = p1_gradient(&m, &u).unwrap()[0];
        // direct 2x2 solve: [x1-x0, x2-x0]^T grad = [u1-u0, u2-u0]
        let e = Matrix2::new(p[1].x - p[0].x, p[1].y - p[0].y, p[2].x - p[0].x, p[2].y - p[0].y);
        let einv = e.try_inverse().unwrap();
        for c in 0..2 {
            let rhs = Vector2::new(u[1][c] - u[0][c], u[2][c] - u[0][c]);
            let grad = einv * rhs;
            assert!((grad.x - g[(c, 0)]).abs() < 1e-12 && (grad.y - g[(c, 1)]).abs() < 1e-12);
        }
    }

    #[test]
    fn transfer_properties() {
        let (_, m) = graded(8.0, 2);
        let big = hexlat(m.outer_layers().unwrap() + 3, 2);
        let g = Matrix2::new(0.01, 0.02, -0.03, 0.04);
        let mut nodal: Vec<[f64; 2]> = m.nodes().iter().map(|x| {
            let v = g * x;
            [v.x, v.y]
        }).collect();
        let out = transfer(&m, &nodal, &big).unwrap();
        let outer = m.outer_layers().unwrap() as i64;
        for a in 0..big.len() {
            let v = g * big.position(a);
            if big.layer(a) <= outer {
                assert!((out.values[a][0] - v.x).abs() < 1e-10 && (out.values[a][1] - v.y).abs() < 1e-10);
            } else {
                assert_eq!(out.values[a], [0.0, 0.0]);
            }
        }
        // random field: atoms at nodes exact, barycenter average via locate
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for v in nodal.iter_mut() {
            *v = [rng.random(), rng.random()];
        }
        let out = transfer(&m, &nodal, &big).unwrap();
        for a in 0..big.len() {
            if let Some(n) = m.node_at(big.coord(a)) {
                assert_eq!(out.values[a], nodal[n]);
            }
        }
        let t = m.num_triangles() - 1;
        let (tri, l) = m.locate(&m.barycenter(t)).unwrap();
        let val: f64 = tri.iter().zip(l).map(|(n, w)| w * nodal[*n][0]).sum();
        let avg: f64 = m.triangles()[t].iter().map(|&n| nodal[n][0]).sum::<f64>() / 3.0;
        assert!((val - avg).abs() < 1e-12);
    }

    #[test]
    fn locate_finds_every_barycenter() {
        let (_, m) = graded(16.0, 11);
        for t in 0..m.num_triangles() {
            let x = m.barycenter(t);
            let (tri, l) = m.locate(&x).unwrap();
            let mut a = tri;
            let mut b = m.triangles()[t];
            a.sort();
            b.sort();
            assert_eq!(a, b, "triangle {t}");
            assert!(l.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-9));
        }
        assert!(m.locate(&Vector2::new(1e4, 0.0)).is_none());
    }

    #[test]
    fn micro_interpolant_affine_and_zero() {
        let lat = hexlat(6, 2);
        let g = Matrix2::new(0.1, 0.2, -0.3, 0.05);
        let u = Displacement {
            values: (0..lat.len()).map(|a| {
                let v = g * lat.position(a);
                [v.x, v.y]
            }).collect(),
        };
        let mi = micro_interpolant(&lat, &u).unwrap();
        assert!(mi.gradients.iter().all(|gt| (gt - g).norm() < 1e-12));
        let z = micro_interpolant(&lat, &Displacement::zeros(lat.len())).unwrap();
        assert_eq!(z.seminorm(), 0.0);
        // 6n^2 + 4nw triangles in the elongated hexagon, minus the 10 touching the two vacancies
        assert_eq!(mi.triangles.len(), 6 * 36 + 4 * 6 - 10);
    }

    #[test]
    fn micro_seminorm_equivalent_to_bond_seminorm() {
        let lat = hexlat(6, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let u = Displacement { values: (0..lat.len()).map(|_| [rng.random(), rng.random()]).collect() };
            let mi = micro_interpolant(&lat, &u).unwrap().seminorm();
            let mut bond = 0.0;
            for a in 0..lat.len() {
                for d in [[1, 0], [0, 1], [-1, 1]] {
                    if let Some(b) = lat.neighbor(a, d) {
                        let du = sub(u.values[b], u.values[a]);
                        bond += du[0] * du[0] + du[1] * du[1];
                    }
                }
            }
            let ratio = mi / bond.sqrt();
            assert!((0.25..=4.0).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn mesh_dump_serializes() {
        let (_, m) = graded(4.0, 2);
        let d = m.dump();
        let s = serde_json::to_string(&d).unwrap();
        let back: MeshDump = serde_json::from_str(&s).unwrap();
        assert_eq!(back.triangles, d.triangles);
        assert_eq!(back.nodes.len(), m.num_nodes());
    }

    #[test]
    fn real_row_distance_matches_integer() {
        let row = [-5, 5];
        for i in -12..12 {
            for j in -8..8 {
                let d = row_distance_real(row, i as f64, j as f64);
                assert_eq!(d, row_distance(row, [i, j]) as f64);
            }
        }
    }
}
