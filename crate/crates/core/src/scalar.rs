//! Floating point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// floating point: f32 or f64
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Lossy conversion from an `f64` literal or computed constant.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }

    #[inline]
    fn of_usize(v: usize) -> Self {
        Self::of(v as f64)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// A point in the plane, in meters.
pub type Point<S> = [S; 2];

#[inline]
pub(crate) fn dist2<S: Scalar>(a: Point<S>, b: Point<S>) -> S {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Scales `v` so its Euclidean norm is at most `max_norm`.
pub fn clamp_norm<S: Scalar>(v: Point<S>, max_norm: S) -> Point<S> {
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    if n > max_norm && n > S::zero() {
        let k = max_norm / n;
        [v[0] * k, v[1] * k]
    } else {
        v
    }
}
