use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Scalar type the solver is generic over. Implemented for `f32` and `f64`.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal, panicking only for values that cannot be represented at all.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal not representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn idx(i: usize) -> Self {
        Self::from_usize(i).expect("index not representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Clamp of `y` to `[-k, k]`.
#[inline]
pub fn clamp_sym<T: Real>(y: T, k: T) -> T {
    y.max(-k).min(k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literals_roundtrip_in_both_widths() {
        assert_eq!(f64::lit(0.5), 0.5);
        assert_eq!(f32::lit(0.25), 0.25f32);
        assert_eq!(f32::idx(7).f64(), 7.0);
    }

    #[test]
    fn symmetric_clamp() {
        assert_eq!(clamp_sym(3.0, 2.0), 2.0);
        assert_eq!(clamp_sym(-7.0, 2.0), -2.0);
        assert_eq!(clamp_sym(1.5f32, 2.0), 1.5);
    }
}
