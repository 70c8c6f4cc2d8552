//! Triangular reference lattice, vacancy defects and interaction stencils.
//!
//! Sites are stored by their integer coordinates `(i, j)` with respect to the
//! lattice basis, so that the position of a site is `A (i, j)^T`. A dense
//! padded index grid gives constant-time neighbour lookup, which keeps the
//! energy assembly on multi-million site reference domains cheap.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Nearest-neighbour hops in integer coordinates of the triangular lattice.
pub const HOPS: [[i64; 2]; 6] = [[1, 0], [0, 1], [-1, 1], [-1, 0], [0, -1], [1, -1]];

/// Integer lattice coordinates of a site.
pub type Coord = [i64; 2];

/// The triangular lattice basis with unit nearest-neighbour spacing.
pub fn triangular_basis() -> Matrix2<f64> {
    let (s, c) = (std::f64::consts::FRAC_PI_3).sin_cos();
    Matrix2::new(1.0, c, 0.0, s)
}

/// Hop distance between two sites whose coordinate difference is `d`.
#[inline]
pub fn hop_norm(d: Coord) -> i64 {
    d[0].abs().max(d[1].abs()).max((d[0] + d[1]).abs())
}

/// Shape of the region of lattice points kept by [`build_lattice`].
///
/// Hexagons and parallelograms are measured from the defect row, so a
/// non-trivial vacancy set produces the elongated variants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    /// All sites within `layers` hops of the defect row.
    Hexagon { layers: u32 },
    /// `|j| <= half_width` and `i` within `half_width` of the defect row.
    Parallelogram { half_width: u32 },
    /// Euclidean ball around the origin.
    Ball { radius: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub basis: Matrix2<f64>,
    pub region: Region,
    pub defect_k: usize,
}

impl LatticeSpec {
    pub fn new(region: Region, defect_k: usize) -> Self {
        Self { basis: triangular_basis(), region, defect_k }
    }
}

/// Vacancy set along `e1` with exactly `k` sites.
///
/// Odd `k` is centred on the origin. Even `k` runs from `-(k/2 - 1)` to
/// `k/2`, so `k = 2` gives the neighbouring pair `{0, e1}`.
pub fn vacancy_set(k: usize) -> Vec<Coord> {
    if k == 0 {
        return Vec::new();
    }
    let k = k as i64;
    let (lo, hi) = if k % 2 == 1 { (-(k - 1) / 2, (k - 1) / 2) } else { (-(k / 2 - 1), k / 2) };
    (lo..=hi).map(|i| [i, 0]).collect()
}

/// Padding of the dense index grid; covers stencils up to hop distance 3.
const PAD: i64 = 3;

#[derive(Clone, Debug)]
pub struct Lattice {
    basis: Matrix2<f64>,
    region: Region,
    sites: Vec<Coord>,
    removed: Vec<Coord>,
    /// Defect row `[lo, hi]` along `e1` (the origin when defect-free).
    row: [i64; 2],
    r_def: f64,
    // padded dense index grid
    imin: i64,
    jmin: i64,
    nj: i64,
    grid: Vec<u32>,
}

const NONE: u32 = u32::MAX;

/// Builds the lattice described by `spec`.
pub fn build_lattice(spec: &LatticeSpec) -> Result<Lattice> {
    let det = spec.basis.determinant();
    if !(det.abs() > 1e-12) || !det.is_finite() {
        return Err(Error::InvalidInput(format!("singular lattice basis (det = {det})")));
    }
    let removed = vacancy_set(spec.defect_k);
    let row = match (removed.first(), removed.last()) {
        (Some(a), Some(b)) => [a[0], b[0]],
        _ => [0, 0],
    };
    let basis = spec.basis;
    let pos = |c: Coord| basis * Vector2::new(c[0] as f64, c[1] as f64);

    // bounding box of candidate coordinates
    let (imin, imax, jmin, jmax) = match spec.region {
        Region::Hexagon { layers } => {
            let l = layers as i64;
            (row[0] - l, row[1] + l, -l, l)
        }
        Region::Parallelogram { half_width } => {
            let l = half_width as i64;
            (row[0] - l, row[1] + l, -l, l)
        }
        Region::Ball { radius } => {
            if !(radius >= 0.0) {
                return Err(Error::InvalidInput(format!("negative ball radius {radius}")));
            }
            let inv = basis.try_inverse().expect("checked non-singular");
            // coordinate extent of the ball: |c_k| <= R * |row k of A^-1|
            let ei = (radius * inv.row(0).norm()).ceil() as i64 + 1;
            let ej = (radius * inv.row(1).norm()).ceil() as i64 + 1;
            (-ei, ei, -ej, ej)
        }
    };
    let inside = |c: Coord| -> bool {
        match spec.region {
            Region::Hexagon { layers } => row_distance(row, c) <= layers as i64,
            Region::Parallelogram { .. } => true,
            Region::Ball { radius } => pos(c).norm() <= radius + 1e-12,
        }
    };
    for v in &removed {
        if !inside(*v) {
            return Err(Error::InvalidInput(format!(
                "vacancy site {v:?} lies outside the lattice region"
            )));
        }
    }
    let is_removed = |c: Coord| c[1] == 0 && c[0] >= row[0] && c[0] <= row[1] && !removed.is_empty();

    let gi0 = imin - PAD;
    let gj0 = jmin - PAD;
    let ni = imax - imin + 1 + 2 * PAD;
    let nj = jmax - jmin + 1 + 2 * PAD;
    let mut grid = vec![NONE; (ni * nj) as usize];
    let mut sites = Vec::new();
    for i in imin..=imax {
        for j in jmin..=jmax {
            let c = [i, j];
            if inside(c) && !is_removed(c) {
                grid[((i - gi0) * nj + (j - gj0)) as usize] = sites.len() as u32;
                sites.push(c);
            }
        }
    }
    if sites.len() >= NONE as usize {
        return Err(Error::InvalidInput("lattice too large for 32-bit indexing".into()));
    }
    let r_def = removed.iter().map(|c| pos(*c).norm()).fold(0.0_f64, f64::max)
        + if removed.is_empty() { 0.0 } else { 1.0 };
    Ok(Lattice {
        basis,
        region: spec.region,
        sites,
        removed,
        row,
        r_def,
        imin: gi0,
        jmin: gj0,
        nj,
        grid,
    })
}

/// Hop distance from `c` to the defect row `[row[0], row[1]] x {0}`.
pub fn row_distance(row: [i64; 2], c: Coord) -> i64 {
    (row[0]..=row[1]).map(|s| hop_norm([c[0] - s, c[1]])).min().unwrap_or(0)
}

impl Lattice {
    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn basis(&self) -> &Matrix2<f64> {
        &self.basis
    }

    pub fn region(&self) -> Region {
        self.region
    }

    /// Area per lattice site, `|det A|`.
    pub fn cell_area(&self) -> f64 {
        self.basis.determinant().abs()
    }

    pub fn sites(&self) -> &[Coord] {
        &self.sites
    }

    pub fn coord(&self, idx: usize) -> Coord {
        self.sites[idx]
    }

    pub fn removed(&self) -> &[Coord] {
        &self.removed
    }

    pub fn defect_row(&self) -> [i64; 2] {
        self.row
    }

    /// Radius of a ball around the origin enclosing the defect core.
    pub fn r_def(&self) -> f64 {
        self.r_def
    }

    pub fn to_position(&self, c: Coord) -> Vector2<f64> {
        self.basis * Vector2::new(c[0] as f64, c[1] as f64)
    }

    pub fn position(&self, idx: usize) -> Vector2<f64> {
        self.to_position(self.sites[idx])
    }

    /// Index of the site with coordinates `c`, if present.
    #[inline]
    pub fn index_of(&self, c: Coord) -> Option<usize> {
        let a = c[0] - self.imin;
        let b = c[1] - self.jmin;
        if a < 0 || b < 0 || b >= self.nj {
            return None;
        }
        match self.grid.get((a * self.nj + b) as usize) {
            Some(&k) if k != NONE => Some(k as usize),
            _ => None,
        }
    }

    /// Neighbour of site `idx` in direction `d`; `d` must be within the grid padding.
    #[inline]
    pub fn neighbor(&self, idx: usize, d: Coord) -> Option<usize> {
        let c = self.sites[idx];
        self.index_of([c[0] + d[0], c[1] + d[1]])
    }

    /// Hop distance of site `idx` from the defect row.
    pub fn layer(&self, idx: usize) -> i64 {
        row_distance(self.row, self.sites[idx])
    }

    /// Euclidean distance of a point from the defect row segment.
    pub fn core_distance(&self, x: &Vector2<f64>) -> f64 {
        let a = self.to_position([self.row[0], 0]);
        let b = self.to_position([self.row[1], 0]);
        segment_distance(x, &a, &b)
    }

    pub fn is_removed(&self, c: Coord) -> bool {
        self.removed.contains(&c)
    }
}

pub fn segment_distance(x: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 { ((x - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (x - (a + ab * t)).norm()
}

/// Interaction directions of a site.
#[derive(Clone, Debug, PartialEq)]
pub struct Stencil {
    pub directions: Vec<Coord>,
    pub r_cut: f64,
}

impl Stencil {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

/// All lattice directions of the homogeneous lattice with `|A d| <= r_cut`
/// (closed ball), ordered lexicographically.
pub fn lattice_directions(basis: &Matrix2<f64>, r_cut: f64) -> Vec<Coord> {
    let inv = match basis.try_inverse() {
        Some(m) => m,
        None => return Vec::new(),
    };
    let ei = (r_cut * inv.row(0).norm()).ceil() as i64 + 1;
    let ej = (r_cut * inv.row(1).norm()).ceil() as i64 + 1;
    let mut out = Vec::new();
    for i in -ei..=ei {
        for j in -ej..=ej {
            if i == 0 && j == 0 {
                continue;
            }
            let r = (basis * Vector2::new(i as f64, j as f64)).norm();
            if r <= r_cut + 1e-12 {
                out.push([i, j]);
            }
        }
    }
    out
}

/// Directions `b - a` to every present site `b` within `r_cut` of `site`.
pub fn neighbor_stencil(lat: &Lattice, site: usize, r_cut: f64) -> Result<Stencil> {
    if site >= lat.len() {
        return Err(Error::InvalidInput(format!("site index {site} out of range")));
    }
    if !(r_cut > 0.0) {
        return Err(Error::InvalidInput(format!("cutoff must be positive, got {r_cut}")));
    }
    let directions = lattice_directions(&lat.basis, r_cut)
        .into_iter()
        .filter(|d| hop_norm(*d) <= PAD)
        .filter(|d| lat.neighbor(site, *d).is_some())
        .collect();
    Ok(Stencil { directions, r_cut })
}

/// Serializable dump of a lattice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeDump {
    pub basis: [[f64; 2]; 2],
    pub region: Region,
    pub defect_k: usize,
    pub sites: Vec<Coord>,
    pub removed: Vec<Coord>,
}

impl Lattice {
    pub fn dump(&self) -> LatticeDump {
        let b = &self.basis;
        LatticeDump {
            basis: [[b[(0, 0)], b[(0, 1)]], [b[(1, 0)], b[(1, 1)]]],
            region: self.region,
            defect_k: self.removed.len(),
            sites: self.sites.clone(),
            removed: self.removed.clone(),
        }
    }

    /// Rebuilds a lattice from a dump, checking that the stored sites agree.
    pub fn load(dump: &LatticeDump) -> Result<Self> {
        let b = dump.basis;
        let spec = LatticeSpec {
            basis: Matrix2::new(b[0][0], b[0][1], b[1][0], b[1][1]),
            region: dump.region,
            defect_k: dump.defect_k,
        };
        let lat = build_lattice(&spec)?;
        if lat.sites != dump.sites || lat.removed != dump.removed {
            return Err(Error::InvalidInput("lattice dump is inconsistent with its spec".into()));
        }
        Ok(lat)
    }
}
