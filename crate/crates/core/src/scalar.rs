//! Scalar abstraction shared by the numeric modules.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating-point type the DSP, network and training code is generic over.
///
/// Implemented for `f32` and `f64`. Training defaults to `f64`; the
/// finite-difference checks need the extra headroom.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + rustfft::FftNum
    + Sum
    + Debug
    + Display
    + LowerExp
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossless widening to `f64`.
    fn to_f64_lossless(self) -> f64;

    /// Conversion from `f64` (rounds for `f32`).
    fn from_f64_lossy(v: f64) -> Self;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64_lossy(v)
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_f64_lossy(n as f64)
    }
}

impl Real for f64 {
    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
}

impl Real for f32 {
    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
}
