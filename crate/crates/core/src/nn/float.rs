use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Scalar type the engine computes in: `f32` for training, `f64` for checks.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`.
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).unwrap()
    }

    #[inline]
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap()
    }
}

impl Float for f32 {}
impl Float for f64 {}
