//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point scalar: `f32` or `f64`.
///
/// Probabilities, logits, feature values and divergences are all expressed in
/// this type. Conversions through `f64` are exact for both implementors, which
/// the persistence layer relies on.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("usize is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite or infinite float converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// `log Σ exp(v)`, stable for large magnitudes. Empty input or all `-inf` gives `-inf`.
pub fn log_sum_exp<F: Real>(values: impl IntoIterator<Item = F> + Clone) -> F {
    let max = values.clone().into_iter().fold(F::neg_infinity(), |m, v| if v > m { v } else { m });
    if max == F::neg_infinity() {
        return max;
    }
    let sum: F = values.into_iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Sample mean and standard error of the mean (n - 1 denominator).
pub(crate) fn mean_and_se<F: Real>(terms: &[F]) -> (F, F) {
    let n = terms.len();
    if n == 0 {
        return (F::nan(), F::nan());
    }
    let nf = F::of_usize(n);
    let mean = terms.iter().copied().sum::<F>() / nf;
    if n == 1 {
        return (mean, F::zero());
    }
    let var = terms.iter().map(|&t| (t - mean) * (t - mean)).sum::<F>() / F::of_usize(n - 1);
    (mean, (var / nf).sqrt())
}
