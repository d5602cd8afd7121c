use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point element type for matrices, models and projections.
///
/// Implemented for `f32` (the storage type of every weight) and `f64`
/// (used for gradient checks and reference computations).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Short name used in diagnostics.
    const NAME: &'static str;

    /// Adjacent representable value, `steps` ulps away (negative steps move
    /// toward negative infinity).
    fn ulp_step(self, steps: i32) -> Self;

    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 converts to every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("every Scalar converts to f64")
    }

    #[inline]
    fn from_i64_exact(x: i64) -> Self {
        <Self as FromPrimitive>::from_i64(x).expect("i64 converts to every Scalar")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn ulp_step(self, steps: i32) -> Self {
        let mut x = self;
        for _ in 0..steps.unsigned_abs() {
            x = if steps > 0 {
                x.next_up()
            } else {
                x.next_down()
            };
        }
        x
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn ulp_step(self, steps: i32) -> Self {
        let mut x = self;
        for _ in 0..steps.unsigned_abs() {
            x = if steps > 0 {
                x.next_up()
            } else {
                x.next_down()
            };
        }
        x
    }
}
