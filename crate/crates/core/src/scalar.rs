//! Floating-point abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar used for probabilities, log-likelihoods and CUSUM statistics.
///
/// Implemented for `f32` and `f64`. The only per-type knob is the clamp
/// applied before any log or log-odds transform.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Probabilities are clamped into `[clamp_eps, 1 - clamp_eps]`.
    ///
    /// `1e-12` for `f64`. For `f32` that value would round `1 - eps` back to
    /// one, so the narrower type uses `1e-6`.
    fn clamp_eps() -> Self;

    /// Lossless-or-nearest conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    /// Widen to `f64` for reporting.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f64 {
    #[inline]
    fn clamp_eps() -> Self {
        1e-12
    }
}

impl Scalar for f32 {
    #[inline]
    fn clamp_eps() -> Self {
        1e-6
    }
}

/// Clamp a probability into the open interval used by every log transform.
#[inline]
pub fn clamp_probability<T: Scalar>(p: T) -> T {
    let eps = T::clamp_eps();
    p.max(eps).min(T::one() - eps)
}

/// `ln(p / (1 - p))` for an already clamped `p`.
#[inline]
pub fn logit<T: Scalar>(p: T) -> T {
    p.ln() - (-p).ln_1p()
}

/// Inverse of [`logit`], evaluated without overflow for large `|z|`.
#[inline]
pub fn inv_logit<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub fn softplus<T: Scalar>(z: T) -> T {
    if z > T::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}
