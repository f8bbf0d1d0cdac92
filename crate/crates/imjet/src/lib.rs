//! Inertial manifolds for Galerkin-truncated semilinear parabolic equations
//!
//! ```text
//!     ∂t u + A u = F(u),   A = diag(λ₁ ≤ λ₂ ≤ … ≤ λ_K)
//! ```
//!
//! The crate builds the manifold graph by the Perron (backward fixed-point)
//! method, computes Taylor jets of the graph along the lowest-dimensional
//! manifold using a ladder of spectral gaps, checks the Whitney compatibility
//! conditions of those jets as residual scaling laws, and assembles a smooth
//! extended manifold together with its inertial form and a modified
//! nonlinearity for which the extension is invariant.
//!
//! Module map:
//!
//! * [`jetcalc`] — symmetric multilinear forms, polynomial jets, polarization,
//!   component extraction, truncated composition and compatibility residuals.
//! * [`spectral`] — eigenvalue ladders, projectors, gap audits and exponent
//!   windows.
//! * [`parasolve`] — trajectories on truncated time windows, the weighted Green
//!   operator, the homogeneous solution operator and the variational solver.
//! * [`perron`] — the manifold chart, its derivative and exponential tracking.
//! * [`jets_manifold`] — higher-order jets of the chart and compatibility checks.
//! * [`extend`] — the smooth extension, extended inertial form and modified
//!   nonlinearity.
//! * [`models`] — Sell's resonant cascade and a 1D reaction–diffusion system.

pub mod error;
pub mod extend;
pub mod jetcalc;
pub mod jets_manifold;
pub mod models;
pub mod numerics;
pub mod parasolve;
pub mod perron;
pub mod spectral;

pub use error::{Error, Result};

/// Toolkit version embedded in reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
