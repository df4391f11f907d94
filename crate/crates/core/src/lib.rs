//! Training-free guidance for multimodal flow-matching samplers.
//!
//! A multimodal state pairs a real coordinate matrix with a vector of
//! discrete symbols. The library builds the closed-form conditional kernels
//! of a rectified (straight-line) continuous flow and a masking discrete
//! flow, exposes a posterior-model interface with exact oracle
//! implementations on small state spaces, and runs the guided sampling loop:
//! a self-normalized Monte Carlo estimate of the guided rate matrix for the
//! discrete part, and projected gradient ascent on the predictor
//! log-score for the continuous part.
//!
//! Everything numeric is generic over the scalar type through
//! [`scalar::Scalar`] (implemented for `f32` and `f64`); concrete aliases
//! for the common `f64` instantiation live at the crate root.
//!
//! The [`oracle`] module holds brute-force enumeration counterparts of every
//! estimated quantity, so the guidance formulas can be checked against exact
//! answers at desk scale.

pub mod error;
pub mod guidance;
pub mod kernels;
pub mod models;
pub mod oracle;
pub mod predictors;
pub mod rng;
pub mod scalar;
pub mod state;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Multimodal state over `f64` coordinates.
pub type MultimodalStateF64 = state::MultimodalState<f64>;
/// Multimodal state over `f32` coordinates.
pub type MultimodalStateF32 = state::MultimodalState<f32>;
/// Time point over `f64`.
pub type TimePointF64 = state::TimePoint<f64>;
/// Guidance hyperparameters over `f64`.
pub type GuidanceConfigF64 = guidance::GuidanceConfig<f64>;
/// Estimated guided rate matrix over `f64`.
pub type GuidedRateEstimateF64 = guidance::GuidedRateEstimate<f64>;
