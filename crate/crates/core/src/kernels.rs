//! Closed-form conditional flow kernels: the straight-line (rectified)
//! continuous interpolant and the masking discrete interpolant, together
//! with the conditional velocity and rate they induce.
//!
//! Given clean data, the continuous part draws `x_t = t*x1 + (1-t)*z` with
//! standard normal `z`; the discrete part keeps a site masked with
//! probability `1 - t` and reveals the clean symbol with probability `t`.
//! The conditional velocity is `(x1 - x_t)/(1 - t)` and the conditional
//! rate moves mass only from the mask to the clean symbol at rate
//! `1/(1 - t)`.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::state::{StateSpaceSpec, Symbol, TimePoint};

/// Query for one entry of the conditional rate matrix.
#[derive(Debug, Clone, Copy)]
pub struct ConditionalRateQuery<T: Scalar> {
    pub current_symbol: Symbol,
    pub target_symbol: Symbol,
    pub clean_symbol: Symbol,
    pub t: TimePoint<T>,
}

/// Draw `x_t | x_1` from the rectified interpolant at time `t`.
pub fn sample_xt_given_x1<T: Scalar, R: Rng + ?Sized>(
    x1: ArrayView1<T>,
    t: TimePoint<T>,
    rng: &mut R,
) -> Array1<T> {
    let tv = t.value();
    let spread = T::one() - tv;
    Array1::from_shape_fn(x1.len(), |i| tv * x1[i] + spread * T::standard_normal(rng))
}

/// Draw `a_t | a_1` from the masking interpolant: the clean symbol with
/// probability `t`, the mask otherwise. The clean symbol must not be the
/// mask (clean data contains no masks).
pub fn sample_at_given_a1<T: Scalar, R: Rng + ?Sized>(
    space: &StateSpaceSpec,
    a1: Symbol,
    t: TimePoint<T>,
    rng: &mut R,
) -> Result<Symbol> {
    space.check_symbol(a1)?;
    if a1 == space.mask_symbol {
        return Err(Error::InvalidArgument(
            "clean symbol may not be the mask".into(),
        ));
    }
    let u = T::unit_uniform(rng);
    Ok(if u < t.value() { a1 } else { space.mask_symbol })
}

/// Conditional velocity `(x1 - x_t) / (1 - t)`; requires `t < 1`.
pub fn conditional_velocity<T: Scalar>(
    x_t: ArrayView1<T>,
    x1: ArrayView1<T>,
    t: TimePoint<T>,
) -> Result<Array1<T>> {
    let rem = t.remaining_before_one()?;
    Ok(Array1::from_shape_fn(x_t.len(), |i| (x1[i] - x_t[i]) / rem))
}

/// Whole-matrix conditional velocity used by the sampling loop.
pub fn conditional_velocity_matrix<T: Scalar>(
    x_t: &Array2<T>,
    x1: &Array2<T>,
    t: TimePoint<T>,
) -> Result<Array2<T>> {
    if x_t.dim() != x1.dim() {
        return Err(Error::InvalidState(format!(
            "velocity endpoints have mismatched shapes {:?} vs {:?}",
            x_t.dim(),
            x1.dim()
        )));
    }
    let rem = t.remaining_before_one()?;
    Ok((x1 - x_t) / rem)
}

/// Conditional rate matrix entry: `1/(1 - t)` when the current symbol is
/// the mask and the target equals the clean symbol, zero otherwise.
pub fn conditional_rate<T: Scalar>(
    space: &StateSpaceSpec,
    query: ConditionalRateQuery<T>,
) -> Result<T> {
    space.check_symbol(query.current_symbol)?;
    space.check_symbol(query.target_symbol)?;
    space.check_symbol(query.clean_symbol)?;
    let rem = query.t.remaining_before_one()?;
    if query.current_symbol == space.mask_symbol && query.target_symbol == query.clean_symbol {
        Ok(T::one() / rem)
    } else {
        Ok(T::zero())
    }
}
