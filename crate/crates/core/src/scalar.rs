//! Scalar abstraction for the geometry core. Everything geometric is written
//! against [`Real`] so it works in f32 or f64; the crate root exports f64
//! aliases, which is what the detection pipeline uses throughout.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Display
    + Default
    + 'static
{
    /// Lossless in practice for the constants used here (small literals).
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("constant not representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}
