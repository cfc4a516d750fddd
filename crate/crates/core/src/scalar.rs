//! Floating-point scalar abstraction shared by the quantizer and the network engine.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar used for network parameters and activations: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal, panicking only on types that cannot hold it.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("scalar conversion")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Rounds to the fp32 storage representation.
    #[inline]
    fn to_f32_storage(self) -> f32 {
        self.to_f32().unwrap_or(f32::NAN)
    }

    #[inline]
    fn from_f32_storage(v: f32) -> Self {
        Self::from_f32(v).unwrap_or_else(Self::nan)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
