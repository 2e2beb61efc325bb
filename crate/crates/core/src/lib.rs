//! Numerical laboratory for null controllability of the one-dimensional
//! nonlocal heat equation
//!
//! ```text
//! y_t − y_xx + ∫₀¹ K(x,θ,t) y(θ,t) dθ = v·1_𝒪   in (0,1)×(0,T),   y = 0 on the boundary.
//! ```

pub mod carleman;
pub mod cli;
pub mod cost;
pub mod counterexample;
pub mod error;
pub mod fixed_point;
pub mod grid;
pub mod hum;
pub mod kernels;
pub mod scenario;
pub mod solver;
pub mod svg;

pub use error::{Error, Result};
