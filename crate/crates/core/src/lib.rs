//! Lattice statics with blended atomistic/continuum coupling.
//!
//! The crate implements the energy-based blended quasicontinuum scheme
//! (BQCE), its ghost-force corrected variant (BGFC), the force-based blended
//! scheme (BQCF) and the pure atomistic reference model for a 2D triangular
//! lattice with an EAM toy potential, plus an anti-plane screw dislocation
//! model and the tooling for convergence studies.
//!
//! Module map:
//!
//! * [`lattice`]: reference lattice, vacancy sets, stencils
//! * [`potential`]: EAM site energy and the Cauchy–Born density
//! * [`atomistic`]: atomistic energy differences and reference solves
//! * [`femgrid`]: graded P1 meshes, midpoint quadrature, interpolation
//! * [`blending`]: blending functions and their norms
//! * [`coupling`]: BQCE/BQCF/BGFC functionals and forces
//! * [`solver`]: L-BFGS and Newton–Krylov solvers with preconditioners
//! * [`antiplane`]: anti-plane screw dislocation variant
//! * [`study`]: error norms, audits, convergence studies and slope fits

pub mod antiplane;
pub mod atomistic;
pub mod blending;
pub mod coupling;
pub mod femgrid;
pub mod lattice;
pub mod potential;
pub mod precond;
pub mod solver;
pub mod study;

pub use nalgebra::{Matrix2, Vector2};

/// Errors raised across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("bond collapse: zero-length bond at site {site}")]
    BondCollapse { site: usize },
    #[error("mesh error: {0}")]
    Mesh(String),
    #[error("solver failed after {iterations} iterations: {reason}")]
    Solver { iterations: usize, reason: String },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
