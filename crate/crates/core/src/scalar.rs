//! Scalar abstraction for the embedding math.
//!
//! Every numeric kernel in this crate is generic over [`Real`] so the same
//! code path runs in `f32` or `f64`. Checkpoints always store `f32` on disk
//! regardless of the in-memory scalar.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, NumCast};

/// Floating-point scalar the model is parameterized over.
pub trait Real:
    Float + FromPrimitive + NumCast + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, used for constants and RNG output.
    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        Self::from(x).expect("finite f64 converts to any Real")
    }

    /// Lossy conversion to `f64`, used for logging and metric aggregation.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
