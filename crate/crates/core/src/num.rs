//! Scalar abstractions shared by the statistics code.
//!
//! Everything that only needs field arithmetic (rate composition, dilution)
//! is written against [`Scalar`] so it runs on exact rationals as well as on
//! floats. Everything that needs `sqrt`, `exp` or special functions is
//! written against [`Real`].

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, Num, ToPrimitive};

/// Field-like scalar with an ordering: floats and `Ratio<i64>` both qualify.
pub trait Scalar: Num + PartialOrd + Clone + Debug {}

impl<T: Num + PartialOrd + Clone + Debug> Scalar for T {}

/// Floating point scalar used by every estimator and test statistic.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal. Infallible for the float types we implement.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    /// Converts a count.
    #[inline]
    fn count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}
