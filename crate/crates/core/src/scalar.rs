//! Scalar abstraction: every numeric kernel in this crate is generic over the
//! working precision. `f64` is the default throughout the CLI; `f32` is
//! supported for memory-bound uses. File formats are fixed independently of
//! the in-memory type (cubes store `f32`, mixture models store `f64`).

use num_traits::{FloatConst, FromPrimitive, ToPrimitive};

/// Floating-point scalar the library computes with.
///
/// `nalgebra::RealField` supplies the field operations and elementary
/// functions, the `num_traits` bounds supply constants and conversions.
pub trait Scalar:
    nalgebra::RealField + FloatConst + FromPrimitive + ToPrimitive + Copy + Default + Send + Sync
{
    /// Lossy round-trip through `f64`, for file IO and reporting.
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar representable as f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Convert an `f64` constant into the working scalar type.
#[inline]
pub fn real<T: Scalar>(v: f64) -> T {
    nalgebra::convert(v)
}

/// Convert a `usize` count into the working scalar type.
#[inline]
pub fn count<T: Scalar>(n: usize) -> T {
    T::from_usize(n).expect("count representable in scalar type")
}
