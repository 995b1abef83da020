//! Scalar abstraction for the numeric core.
//!
//! Model math is generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` where tests need finite-difference headroom.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless-enough conversion from `f64` intermediate values.
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 -> scalar conversion")
    }

    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("scalar -> f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
