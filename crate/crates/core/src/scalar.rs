//! Scalar abstraction for the numeric core.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::ScalarOperand;
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating-point scalar the whole library is generic over.
///
/// Bundles the `num-traits` arithmetic surface with the two random draws the
/// samplers need. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Convert a finite `f64` constant (tolerances, defaults) into `Self`.
    fn from_f64_c(value: f64) -> Self {
        <Self as FromPrimitive>::from_f64(value).expect("finite f64 constant")
    }

    /// Widen to `f64` for reporting.
    fn to_f64_c(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar widens to f64")
    }

    /// One standard-normal draw.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// One uniform draw in `[0, 1)`.
    fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
                StandardNormal.sample(rng)
            }

            fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
                rng.random()
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);
