//! Scalar abstraction so the whole stack runs in f32 (training) or f64
//! (gradient checking) without duplicated kernels.

use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssignOps};

/// Element type of tensors. Implemented for `f32` and `f64`.
pub trait Scalar: Float + NumAssignOps + Debug + Display + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Read back from the 32-bit checkpoint payload.
    fn from_f32(v: f32) -> Self;
    /// Checkpoint payloads are always 32-bit little-endian floats.
    fn to_f32(self) -> f32;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline]
    fn to_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn to_f32(self) -> f32 {
        self as f32
    }
}

/// Numerically stable logistic function with output clamped to the open
/// interval (0, 1): saturated values are pulled back to the nearest
/// representable neighbour so attention maps never reach 0 or 1 exactly.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    let one = T::one();
    let s = if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    // largest representable value below 1 is 1 - eps/2
    let hi = one - T::epsilon() / (one + one);
    s.max(T::min_positive_value()).min(hi)
}
