//! Scalar abstraction for the statistical kernels.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;

/// Floating-point scalar the math kernels are generic over: `f32` or `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + Sum<Self>
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from an `f64` constant. Panics only for
    /// non-finite inputs, which never occur for the constants we embed.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }

    /// Conversion from an integer count.
    fn of_u64(x: u64) -> Self {
        Self::from_u64(x).expect("count fits the scalar type")
    }
}

impl Real for f32 {}
impl Real for f64 {}
