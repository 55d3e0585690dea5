//! Nonlinear model predictive control toolchain: symbolic expressions,
//! model files, optimal control problem transcription, an SQP solver and a
//! handle-based controller runtime.

pub mod expr;
pub mod model_io;
pub mod ocp;
pub mod offsetfree;
pub mod presets;
pub mod problem;
pub mod runtime;
pub mod solver;
pub mod transcription;

/// Seed for randomized test data: `NMPC_FORGE_SEED` when set to an
/// integer, else `default`.
pub fn seed_from_env(default: u64) -> u64 {
    std::env::var("NMPC_FORGE_SEED")
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(default)
}
