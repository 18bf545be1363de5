//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! All model code is written against [`Real`], which is implemented for `f32`
//! and `f64`. Special functions and random variates are evaluated in `f64` and
//! converted back, which is exact for `f64` and rounds once for `f32`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point scalar usable throughout the model.
pub trait Real:
    RealField
    + Copy
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
    /// Converts an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("finite conversion to f64")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::lit(n as f64)
    }

    /// Natural log of the Gamma function.
    fn log_gamma(self) -> Self {
        Self::lit(statrs::function::gamma::ln_gamma(self.as_f64()))
    }

    fn digamma(self) -> Self {
        Self::lit(statrs::function::gamma::digamma(self.as_f64()))
    }

    #[inline]
    fn neg_infinity() -> Self {
        Self::lit(f64::NEG_INFINITY)
    }

    #[inline]
    fn infinity() -> Self {
        Self::lit(f64::INFINITY)
    }

    /// Smallest positive normal value.
    fn min_normal() -> Self;

    /// Maps values below the square root of [`Real::min_normal`] to zero, so
    /// that products of two flushed values never land in the subnormal range.
    #[inline]
    fn flush_tiny(self) -> Self {
        if self.abs() < Self::min_normal().sqrt() {
            Self::zero()
        } else {
            self
        }
    }
}

impl Real for f32 {
    fn min_normal() -> Self {
        f32::MIN_POSITIVE
    }
}

impl Real for f64 {
    fn min_normal() -> Self {
        f64::MIN_POSITIVE
    }
}

/// Draws `N(0, 1)`.
#[inline]
pub fn standard_normal<T: Real, R: Rng + ?Sized>(rng: &mut R) -> T {
    let v: f64 = StandardNormal.sample(rng);
    T::lit(v)
}

/// Draws uniformly from `[0, 1)`.
#[inline]
pub fn uniform01<T: Real, R: Rng + ?Sized>(rng: &mut R) -> T {
    T::lit(rng.random::<f64>())
}

/// Draws from `Gamma(shape, rate)`.
pub fn gamma_variate<T: Real, R: Rng + ?Sized>(shape: T, rate: T, rng: &mut R) -> T {
    let dist =
        rand_distr::Gamma::new(shape.as_f64(), 1.0 / rate.as_f64()).expect("gamma parameters validated by caller");
    T::lit(dist.sample(rng))
}

/// Draws a Poisson count with the given mean.
pub fn poisson_variate<T: Real, R: Rng + ?Sized>(mean: T, rng: &mut R) -> u64 {
    let m = mean.as_f64();
    if m <= 0.0 {
        return 0;
    }
    let dist = rand_distr::Poisson::new(m).expect("finite positive mean");
    dist.sample(rng) as u64
}

/// `log(sum(exp(v)))` computed stably. Returns `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp<T: Real>(v: &[T]) -> T {
    let mut max = T::neg_infinity();
    for &x in v {
        if x > max {
            max = x;
        }
    }
    if !max.is_finite() {
        return max;
    }
    let s: T = v.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}
