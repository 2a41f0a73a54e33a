//! Floating-point abstraction shared by the model, scoring and evaluation code.

use std::fmt::{Debug, Display};
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar the engine computes in: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + FromStr
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Converts an `f64` literal. Every finite `f64` is representable (with rounding) in both impls.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal not representable")
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count not representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar not convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Overflow-safe `ln(exp(a) + exp(b))`.
pub fn log_sum_exp2<T: Scalar>(a: T, b: T) -> T {
    let m = a.max(b);
    if m == T::neg_infinity() {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}
