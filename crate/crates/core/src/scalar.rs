//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};

use ndarray::NdFloat;
use num_traits::FromPrimitive;
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point element type of tokens, parameters and losses.
///
/// Implemented for `f32` and `f64`. Gradient checks run in `f64`; the
/// model itself is agnostic.
pub trait Scalar:
    NdFloat + FromPrimitive + Default + Debug + Display + Serialize + DeserializeOwned
{
    /// Lossless for `f64`, rounding for `f32`.
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Little-endian bytes of the value widened to `f64`, used for hashing.
    fn hash_bytes(self) -> [u8; 8] {
        self.as_f64().to_le_bytes()
    }
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
