//! Batch front-end for the particle eigenvalue solver: configuration,
//! sweeps with warm-start chaining, the convergence harness, and file
//! output.

pub mod config;
pub mod converge;
pub mod sweep;

use ipm_core::CoreError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;

/// Exit code for a failed invocation: 1 for configuration problems,
/// 2 for runtime failures.
pub fn exit_code(err: &CoreError) -> i32 {
    match err {
        CoreError::UnknownProblem(_)
        | CoreError::InvalidOption(_)
        | CoreError::InvalidConfig(_)
        | CoreError::DimensionMismatch(_)
        | CoreError::Parse { .. }
        | CoreError::Domain(_)
        | CoreError::EmptyInput(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}
