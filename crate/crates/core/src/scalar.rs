//! Floating point abstraction shared by every numeric routine in the crate.
//!
//! Storage and the solver math are written once against [`Scalar`] and
//! instantiated for `f32` (compact image storage) and `f64` (training and
//! reference computations). Reductions always accumulate in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// floating point: f32 or f64
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal or accumulator into this type.
    #[inline]
    fn of(x: f64) -> Self {
        // f32/f64 conversions from f64 never fail (they may round or saturate to inf).
        Self::from_f64(x).unwrap_or_else(Self::nan)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Sum of `f64` values in slice order.
///
/// All reductions go through a fixed left-to-right order so results do not
/// depend on how work was scheduled.
#[inline]
pub(crate) fn sum_f64<T: Scalar>(values: &[T]) -> f64 {
    values.iter().fold(0.0, |acc, v| acc + v.as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions_round_trip_for_both_widths() {
        assert_eq!(f32::of(0.5).as_f64(), 0.5);
        assert_eq!(f64::of(0.1), 0.1);
        assert!(f32::of(1e300).is_infinite());
    }

    #[test]
    fn sum_accumulates_in_f64() {
        let v = vec![1e8_f32, 1.0, -1e8];
        assert_eq!(sum_f64(&v), 1.0);
    }
}
