//! Scalar abstraction shared by every module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating-point type the solver is generic over (`f32` or `f64`).
pub trait Real:
    Float + FloatConst + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Converts an `f64` literal; exact for `f64`, rounded for `f32`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    /// Tolerance used when checking that a vector has unit length.
    fn unit_tolerance() -> Self {
        let eps = Self::epsilon() * Self::lit(64.0);
        eps.max(Self::lit(1e-12))
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Fixed-size vector helpers on `[T; D]`.
pub mod vecn {
    use super::Real;

    #[inline]
    pub fn dot<T: Real, const D: usize>(a: &[T; D], b: &[T; D]) -> T {
        let mut s = T::zero();
        for i in 0..D {
            s = s + a[i] * b[i];
        }
        s
    }

    #[inline]
    pub fn norm_sq<T: Real, const D: usize>(a: &[T; D]) -> T {
        dot(a, a)
    }

    #[inline]
    pub fn norm<T: Real, const D: usize>(a: &[T; D]) -> T {
        norm_sq(a).sqrt()
    }

    #[inline]
    pub fn add<T: Real, const D: usize>(a: &[T; D], b: &[T; D]) -> [T; D] {
        let mut r = *a;
        for i in 0..D {
            r[i] = a[i] + b[i];
        }
        r
    }

    #[inline]
    pub fn sub<T: Real, const D: usize>(a: &[T; D], b: &[T; D]) -> [T; D] {
        let mut r = *a;
        for i in 0..D {
            r[i] = a[i] - b[i];
        }
        r
    }

    #[inline]
    pub fn scale<T: Real, const D: usize>(a: &[T; D], s: T) -> [T; D] {
        let mut r = *a;
        for x in r.iter_mut() {
            *x = *x * s;
        }
        r
    }

    /// `a + s * b`
    #[inline]
    pub fn axpy<T: Real, const D: usize>(a: &[T; D], s: T, b: &[T; D]) -> [T; D] {
        let mut r = *a;
        for i in 0..D {
            r[i] = a[i] + s * b[i];
        }
        r
    }

    pub fn zero<T: Real, const D: usize>() -> [T; D] {
        [T::zero(); D]
    }
}
