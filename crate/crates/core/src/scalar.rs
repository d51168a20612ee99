//! Scalar abstraction for the numeric kernel.
//!
//! All core math (geometry, autodiff tape, networks, losses, metrics) is
//! generic over [`Scalar`] so it runs on `f32` or `f64`. The crate root pins
//! concrete `f64` aliases, which is what the training, optimization, and
//! persistence paths use.

use num_traits::{Float, FromPrimitive, NumAssign};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar: `f32` or `f64`.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal or intermediate.
    fn cast(v: f64) -> Self {
        Self::from_f64(v).expect("f64 value not representable")
    }

    /// Widen to `f64` (exact for f32/f64).
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar not convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
