//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use rustdct::DctNum;

/// Floating point type the library is generic over: `f32` or `f64`.
///
/// Files on disk are always 64-bit; `f32` fields are widened on save and
/// narrowed on load.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + DctNum
    + Debug
    + Display
    + Default
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Infallible for the supported types.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("finite scalar converts to f64")
    }

    /// Tolerance used where a routine asks for "1e-12 relative" but the
    /// scalar cannot resolve it: `max(target, 64 * epsilon)`.
    #[inline]
    fn tol(target: f64) -> Self {
        Self::lit(target).max(Self::epsilon() * Self::lit(64.0))
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// A point in the 2-D latent space (or its transformed image).
pub type Point<S> = [S; 2];

#[inline]
pub(crate) fn dist<S: Scalar>(a: Point<S>, b: Point<S>) -> S {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[inline]
pub(crate) fn lerp<S: Scalar>(a: Point<S>, b: Point<S>, s: S) -> Point<S> {
    let r = S::one() - s;
    [r * a[0] + s * b[0], r * a[1] + s * b[1]]
}
