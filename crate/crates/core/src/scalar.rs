//! Scalar abstraction: everything numeric in the crate is generic over
//! `Scalar`, implemented for `f32` (training) and `f64` (gradient checks
//! and analysis, where the extra headroom matters).

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn cast_from(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 convertible")
    }

    fn cast_usize(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize convertible")
    }

    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("finite scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
