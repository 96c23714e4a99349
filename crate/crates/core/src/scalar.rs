//! Floating-point abstraction for the numeric core.
//!
//! Everything that does arithmetic on policy weights, log-probabilities,
//! rewards, or gradients is generic over [`Scalar`] so the same code runs in
//! `f32` or `f64`. The tests and the experiment pipeline use `f64`; `f32` is
//! exercised by smoke tests to keep the abstraction honest.

use std::fmt::{Debug, Display};
use std::num::ParseFloatError;
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + FromStr<Err = ParseFloatError>
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from `f64` (hyperparameters, probabilities).
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any Scalar")
    }

    /// Widening conversion to `f64` for reporting and cross-type checks.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numerically stable `ln(1 + e^x)`.
///
/// For large `x` the naive form overflows; for very negative `x` it loses all
/// precision. Both tails are handled so `softplus(-z)` is usable as the
/// stable form of `-ln(sigmoid(z))` at any magnitude of `z`.
pub fn softplus<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, underflow-safe on both tails.
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `ln(sum_i exp(x_i))` with max-shift stabilization.
///
/// Empty input is a caller bug (there is always at least one token).
pub fn log_sum_exp<S: Scalar>(xs: &[S]) -> S {
    debug_assert!(!xs.is_empty());
    let m = xs.iter().cloned().fold(S::neg_infinity(), S::max);
    if m == S::neg_infinity() {
        return S::neg_infinity();
    }
    let mut acc = S::zero();
    for &x in xs {
        acc = acc + (x - m).exp();
    }
    m + acc.ln()
}
