//! Scalar abstraction shared by the model, losses and metrics.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar type the numerical core is generic over.
///
/// Implemented for `f32` (training and persisted checkpoints) and `f64`
/// (gradient checks and metric oracles).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`; every finite `f64` maps to some value.
    fn c(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn of_count(n: usize) -> Self {
        Self::c(n as f64)
    }

    /// Bit pattern widened to 64 bits, used for checksums.
    fn to_bits_u64(self) -> u64;
}

impl Scalar for f32 {
    #[inline]
    fn c(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn to_bits_u64(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Scalar for f64 {
    #[inline]
    fn c(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }
}
