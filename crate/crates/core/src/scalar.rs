//! Floating-point scalar abstraction used by every numerical routine.
//!
//! The estimators only need real-field arithmetic (square roots, exponentials,
//! symmetric eigen-decompositions), so the bound is nalgebra's [`RealField`]
//! plus lossless conversions from `f64` constants via `num-traits`.

use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

pub trait Scalar:
    RealField + Copy + FromPrimitive + ToPrimitive + Display + Debug + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::lit(n as f64)
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Smallest probability allowed before forming variance weights.
    ///
    /// `1e-12` in double precision; widened for narrower types so that
    /// `1 - floor` stays distinguishable from one.
    #[inline]
    fn probability_floor() -> Self {
        let eps = Self::default_epsilon() * Self::lit(4.0);
        let floor = Self::lit(1e-12);
        if eps > floor {
            eps
        } else {
            floor
        }
    }

    #[inline]
    fn is_finite_value(self) -> bool {
        self.to_f64_lossy().is_finite()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
