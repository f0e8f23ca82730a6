//! Scalar abstraction for the network stack.
//!
//! Geometry always runs in f64. The neural layers are generic over [`Real`]
//! so that training runs in f32 while gradient checking runs the identical
//! code path in f64.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable by every layer: f32 or f64.
pub trait Real:
    Float + NumAssign + FromPrimitive + ScalarOperand + LinalgScalar + Sum + Debug + Display + 'static
{
    /// Lossy conversion from f64 (used for constants and RNG draws).
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("f64 conversion")
    }
    /// Widening conversion to f64 (used for diagnostics and IO).
    fn to_f64_lossy(self) -> f64;
    /// Lossy conversion from usize (used for counts in means).
    fn from_usize_lossy(x: usize) -> Self {
        Self::from_f64_lossy(x as f64)
    }
}

impl Real for f32 {
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn to_f64_lossy(self) -> f64 {
        self
    }
}
