//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar used for weights, membrane potentials and gradients: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`; panics never (both impls are total).
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    #[inline]
    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).unwrap_or_else(Self::nan)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Name written into checkpoints.
    const DTYPE: &'static str;
    /// Dtype tag byte in the checkpoint tensor table.
    const DTYPE_TAG: u8;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const DTYPE_TAG: u8 = 0;
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const DTYPE_TAG: u8 = 1;
}
