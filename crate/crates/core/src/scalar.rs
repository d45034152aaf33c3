//! Scalar abstraction shared by the geometry and state-space code.

use std::fmt::Debug;

use nalgebra::RealField;
use num_traits::ToPrimitive;

/// Floating-point type the numeric core is generic over (`f32` or `f64`).
///
/// Everything numerically sensitive is tested at `f64`; `f32` instantiations
/// work but the default tolerances are clamped to the type's epsilon.
pub trait Scalar: RealField + Copy + ToPrimitive + Debug + Send + Sync + 'static {}

impl<T> Scalar for T where T: RealField + Copy + ToPrimitive + Debug + Send + Sync + 'static {}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    nalgebra::convert(x)
}

/// Lossy conversion to `f64`, used for error payloads and reporting.
#[inline]
pub fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// `max(tol, k * eps)`: keeps `f64` tolerances as written while giving `f32`
/// something it can actually reach.
#[inline]
pub(crate) fn tolerance<T: Scalar>(tol: f64, eps_multiple: f64) -> T {
    let eps = to_f64(T::default_epsilon());
    lit(tol.max(eps * eps_multiple))
}
