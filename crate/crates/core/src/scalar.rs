//! Scalar abstraction for the link models.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};

// Link models are written against `Scalar` so they can be evaluated in f32 or
// f64. The rest of the emulator runs its clocks in f64.
pub trait Scalar:
    'static + Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync
{
    /// Lossless-enough conversion for literal constants.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
