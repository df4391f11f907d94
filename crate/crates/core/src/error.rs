//! Crate-wide error type.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A state or coordinate matrix violated a structural invariant
    /// (shape mismatch, non-finite entry, symbol out of range).
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// An operation argument was outside its domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The operation divides by `1 - t` and was called at `t >= 1`.
    #[error("time singularity: requires t < 1, got t = {0}")]
    Singularity(f64),

    /// A discrete posterior had zero total mass: the conditioning symbols
    /// are incompatible with every support point of the prior.
    #[error("degenerate posterior: no compatible completion has positive probability")]
    DegeneratePosterior,

    /// An exact enumeration would exceed the joint-state cap.
    #[error("enumeration capacity exceeded: {required} joint states > cap {cap}")]
    CapacityExceeded { required: u128, cap: usize },

    /// Tables that must share a support had different shapes.
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    /// A predictor produced a non-finite score.
    #[error("predictor evaluation produced a non-finite value: {0}")]
    PredictorEvaluation(String),

    /// Gradient guidance produced a non-finite update; the iteration index
    /// identifies where the ascent was abandoned.
    #[error("non-finite gradient at guidance iteration {iteration}")]
    NonFiniteGradient { iteration: usize },

    /// A mask symbol survived to t = 1. The forced final unmasking step
    /// makes this unreachable; seeing it means a sampler invariant broke.
    #[error("internal invariant violated: mask symbol remains at t = 1 (site {site})")]
    ResidualMask { site: usize },
}
