//! Interacting particle method for principal eigenvalues of tilted
//! generators, with matrix-Riccati references for the vanishing-noise
//! limit and Legendre-transform rate functions for entropy production.

pub mod analysis;
pub mod engine;
pub mod error;
pub mod io;
pub mod model;
pub mod reference;
pub mod rng;

pub use error::{CoreError, Result};
pub use model::{builtin_problem, evaluate_u, BuiltinOptions, ProblemSpec, WeightParams};
