use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Scalar types the tensor core computes on.
///
/// `f32` is the training default; `f64` is used wherever finite-difference
/// verification needs the extra precision.
pub trait Real: Float + Sum + Debug + Display + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    fn from_usize(x: usize) -> Self {
        Self::from_f64(x as f64)
    }
}

impl Real for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
