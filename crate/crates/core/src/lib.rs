//! Top Lyapunov exponents of linear cooperative systems `ẏ = A(ω_t) y`
//! driven by uniquely ergodic environments.
//!
//! The general estimator averages the projective growth rate along a
//! simulated trajectory. Periodic environments also get exact solvers based
//! on the period map and on the monodromy matrix. The [`regimes`] module sweeps
//! the environment speed and compares against the fast and slow limits.

// `!(x > 0.0)` style guards deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod environment;
pub mod error;
pub mod linalg;
pub mod lyapunov;
pub mod regimes;
pub mod seed;

pub use error::{CoreError, Result};
