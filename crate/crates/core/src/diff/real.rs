use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Scalar type the body model, camera and losses are written against.
///
/// `f64` evaluates plainly; [`Var`](super::Var) records onto a tape so the
/// same code yields reverse-mode gradients.
pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
{
    fn constant(v: f64) -> Self;
    fn value(&self) -> f64;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;

    fn zero() -> Self {
        Self::constant(0.0)
    }

    fn square(self) -> Self {
        self * self
    }

    fn is_finite(&self) -> bool {
        self.value().is_finite()
    }
}

impl Real for f64 {
    #[inline]
    fn constant(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
}

/// Sums a sequence in iteration order.
pub fn sum<R: Real>(items: impl IntoIterator<Item = R>) -> R {
    let mut acc = R::zero();
    for x in items {
        acc += x;
    }
    acc
}
