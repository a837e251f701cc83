//! Stochastic receding-horizon control toolkit.
//!
//! The crate is organised bottom-up:
//!
//! - [`models`]: controlled systems `x' = f(x, u, w)`, noise laws, cost pairs
//!   `(c, c_F)`, control sets and complete [`models::Scenario`]s.
//! - [`policy`]: stage policies, policy sequences and concatenation, radial
//!   saturation and the bounded-control stabilizer for orthogonal systems.
//! - [`riccati`]: Lyapunov/Riccati synthesis for linear-quadratic problems.
//! - [`dpsolve`]: gridded finite-horizon dynamic programming and receding
//!   horizon policy extraction.
//! - [`certify`]: numerical drift certificates (geometric drift, constant
//!   drift, cost-selection assumptions, value-function drift, sandwich bounds).
//! - [`montecarlo`]: closed-loop simulation, Lyapunov sequences, tails and
//!   long-run average cost estimators.

pub mod certify;
pub mod dpsolve;
pub mod error;
pub mod grid;
pub mod linalg;
pub mod models;
pub mod montecarlo;
pub mod policy;
pub mod quadrature;
pub mod riccati;
pub mod sampling;

pub use error::{Error, Result};
