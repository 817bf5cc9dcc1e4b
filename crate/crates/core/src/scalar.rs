//! Scalar abstraction shared by every numerical routine in the crate.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real floating-point scalar: `f32`, `f64`, or any extended-precision type
/// implementing the `num_traits` float interface.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal. Panics only for types that cannot represent
    /// finite `f64` values, which no supported scalar does.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal not representable")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize not representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Real for T where
    T: Float + FromPrimitive + ToPrimitive + NumAssign + Debug + Display + Send + Sync + 'static
{
}

/// Infinity norm of a slice; zero for an empty slice, NaN if any entry is NaN.
pub fn norm_inf<T: Real>(v: &[T]) -> T {
    let mut m = T::zero();
    for &x in v {
        if x.is_nan() {
            return x;
        }
        m = m.max(x.abs());
    }
    m
}

/// `n!` as a scalar.
pub fn factorial<T: Real>(n: usize) -> T {
    (1..=n).fold(T::one(), |acc, k| acc * T::from_usize_lossy(k))
}

pub fn all_finite<T: Real>(v: &[T]) -> bool {
    v.iter().all(|x| x.is_finite())
}
