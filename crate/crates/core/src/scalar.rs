//! Scalar trait shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar usable by the model, the losses and the gradient checker.
///
/// Implemented for `f32` and `f64`. Training and gradient checks run in `f64`;
/// `f32` is supported for inference and experiments.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    /// Name written into checkpoint manifests.
    const NAME: &'static str;

    /// Converts an `f64` literal. Never fails for the supported types.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

/// Logistic function, evaluated without overflow for large |x|.
#[inline]
pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `ln(1 + e^x)`, stable on both tails.
#[inline]
pub fn softplus<F: Scalar>(x: F) -> F {
    if x > F::lit(30.0) {
        x
    } else if x < F::lit(-30.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}
