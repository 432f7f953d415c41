//! Elastic binary and ternary collision maps.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::{vecn, Real};

fn check_unit<T: Real>(norm_sq: T) -> Result<()> {
    if (norm_sq - T::one()).abs() > T::unit_tolerance() || !norm_sq.is_finite() {
        return Err(Error::NotUnit(norm_sq.as_f64()));
    }
    Ok(())
}

/// Post-collisional velocities `(v', v1')` of a binary collision with impact direction `omega`.
pub fn binary_map<T: Real, const D: usize>(v: &[T; D], v1: &[T; D], omega: &[T; D]) -> Result<([T; D], [T; D])> {
    check_unit(vecn::norm_sq(omega))?;
    let u = vecn::sub(v1, v);
    let s = vecn::dot(omega, &u);
    Ok((vecn::axpy(v, s, omega), vecn::axpy(v1, -s, omega)))
}

/// Post-collisional velocities `(v*, v1*, v2*)` of a ternary collision with
/// impact directions `(omega1, omega2)`, `|omega1|^2 + |omega2|^2 = 1`.
pub fn ternary_map<T: Real, const D: usize>(
    v: &[T; D],
    v1: &[T; D],
    v2: &[T; D],
    omega1: &[T; D],
    omega2: &[T; D],
) -> Result<([T; D], [T; D], [T; D])> {
    check_unit(vecn::norm_sq(omega1) + vecn::norm_sq(omega2))?;
    let c = ternary_coefficient(v, v1, v2, omega1, omega2);
    let sum = vecn::add(omega1, omega2);
    Ok((vecn::axpy(v, c, &sum), vecn::axpy(v1, -c, omega1), vecn::axpy(v2, -c, omega2)))
}

/// `c = [omega1 . (v1 - v) + omega2 . (v2 - v)] / (1 + omega1 . omega2)`.
#[inline]
pub fn ternary_coefficient<T: Real, const D: usize>(
    v: &[T; D],
    v1: &[T; D],
    v2: &[T; D],
    omega1: &[T; D],
    omega2: &[T; D],
) -> T {
    let num = vecn::dot(omega1, &vecn::sub(v1, v)) + vecn::dot(omega2, &vecn::sub(v2, v));
    num / (T::one() + vecn::dot(omega1, omega2))
}

/// `sqrt(|v - v1|^2 + |v - v2|^2 + |v1 - v2|^2)`.
pub fn u_tilde_mag<T: Real, const D: usize>(v: &[T; D], v1: &[T; D], v2: &[T; D]) -> T {
    (vecn::norm_sq(&vecn::sub(v, v1)) + vecn::norm_sq(&vecn::sub(v, v2)) + vecn::norm_sq(&vecn::sub(v1, v2))).sqrt()
}

/// A binary collision with its pre- and post-collisional velocities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinaryFrame<T, const D: usize> {
    pub v: [T; D],
    pub v1: [T; D],
    pub omega: [T; D],
    pub vp: [T; D],
    pub v1p: [T; D],
}

impl<T: Real, const D: usize> BinaryFrame<T, D> {
    pub fn new(v: [T; D], v1: [T; D], omega: [T; D]) -> Result<Self> {
        let (vp, v1p) = binary_map(&v, &v1, &omega)?;
        Ok(Self { v, v1, omega, vp, v1p })
    }

    /// Relative velocity `u = v1 - v`.
    pub fn u(&self) -> [T; D] {
        vecn::sub(&self.v1, &self.v)
    }

    pub fn momentum_residual(&self) -> T {
        let pre = vecn::add(&self.v, &self.v1);
        let post = vecn::add(&self.vp, &self.v1p);
        let scale = (vecn::norm(&self.v) + vecn::norm(&self.v1)).max(T::min_positive_value());
        vecn::norm(&vecn::sub(&post, &pre)) / scale
    }

    pub fn energy_residual(&self) -> T {
        let pre = vecn::norm_sq(&self.v) + vecn::norm_sq(&self.v1);
        let post = vecn::norm_sq(&self.vp) + vecn::norm_sq(&self.v1p);
        (post - pre).abs() / pre.max(T::min_positive_value())
    }

    /// Residual of `omega . u' = -omega . u`.
    pub fn specular_residual(&self) -> T {
        let up = vecn::sub(&self.v1p, &self.vp);
        let u = self.u();
        let scale = vecn::norm(&u).max(T::min_positive_value());
        (vecn::dot(&self.omega, &up) + vecn::dot(&self.omega, &u)).abs() / scale
    }

    /// Applies the map again to the post-collisional pair and returns the
    /// relative distance to the pre-collisional pair.
    pub fn involution_residual(&self) -> Result<T> {
        let (a, b) = binary_map(&self.vp, &self.v1p, &self.omega)?;
        let err = vecn::norm(&vecn::sub(&a, &self.v)) + vecn::norm(&vecn::sub(&b, &self.v1));
        let scale = (vecn::norm(&self.v) + vecn::norm(&self.v1)).max(T::min_positive_value());
        Ok(err / scale)
    }
}

/// A ternary collision with its pre- and post-collisional velocities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TernaryFrame<T, const D: usize> {
    pub v: [T; D],
    pub v1: [T; D],
    pub v2: [T; D],
    pub omega1: [T; D],
    pub omega2: [T; D],
    pub vs: [T; D],
    pub v1s: [T; D],
    pub v2s: [T; D],
}

impl<T: Real, const D: usize> TernaryFrame<T, D> {
    pub fn new(v: [T; D], v1: [T; D], v2: [T; D], omega1: [T; D], omega2: [T; D]) -> Result<Self> {
        let (vs, v1s, v2s) = ternary_map(&v, &v1, &v2, &omega1, &omega2)?;
        Ok(Self { v, v1, v2, omega1, omega2, vs, v1s, v2s })
    }

    pub fn u_tilde_mag(&self) -> T {
        u_tilde_mag(&self.v, &self.v1, &self.v2)
    }

    fn speed_scale(&self) -> T {
        (vecn::norm(&self.v) + vecn::norm(&self.v1) + vecn::norm(&self.v2)).max(T::min_positive_value())
    }

    pub fn momentum_residual(&self) -> T {
        let pre = vecn::add(&vecn::add(&self.v, &self.v1), &self.v2);
        let post = vecn::add(&vecn::add(&self.vs, &self.v1s), &self.v2s);
        vecn::norm(&vecn::sub(&post, &pre)) / self.speed_scale()
    }

    pub fn energy_residual(&self) -> T {
        let pre = vecn::norm_sq(&self.v) + vecn::norm_sq(&self.v1) + vecn::norm_sq(&self.v2);
        let post = vecn::norm_sq(&self.vs) + vecn::norm_sq(&self.v1s) + vecn::norm_sq(&self.v2s);
        (post - pre).abs() / pre.max(T::min_positive_value())
    }

    /// Residual of `omega1 . (v1* - v*) + omega2 . (v2* - v*) = -[omega1 . (v1 - v) + omega2 . (v2 - v)]`.
    pub fn specular_residual(&self) -> T {
        let pre = vecn::dot(&self.omega1, &vecn::sub(&self.v1, &self.v)) + vecn::dot(&self.omega2, &vecn::sub(&self.v2, &self.v));
        let post =
            vecn::dot(&self.omega1, &vecn::sub(&self.v1s, &self.vs)) + vecn::dot(&self.omega2, &vecn::sub(&self.v2s, &self.vs));
        (pre + post).abs() / self.speed_scale()
    }

    /// Relative residual of `|u~|` being invariant under the map.
    pub fn u_tilde_residual(&self) -> T {
        let pre = self.u_tilde_mag();
        let post = u_tilde_mag(&self.vs, &self.v1s, &self.v2s);
        (post - pre).abs() / pre.max(T::min_positive_value())
    }

    pub fn involution_residual(&self) -> Result<T> {
        let (a, b, c) = ternary_map(&self.vs, &self.v1s, &self.v2s, &self.omega1, &self.omega2)?;
        let err = vecn::norm(&vecn::sub(&a, &self.v)) + vecn::norm(&vecn::sub(&b, &self.v1)) + vecn::norm(&vecn::sub(&c, &self.v2));
        Ok(err / self.speed_scale())
    }
}

/// Family of an impact direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImpactKind {
    Binary,
    Ternary,
}

/// Uniformly distributed point on `S^{D-1}` (normalized Gaussian).
pub fn sample_sphere<T: Real, R: Rng + ?Sized, const D: usize>(rng: &mut R) -> [T; D]
where
    StandardNormal: Distribution<T>,
{
    loop {
        let mut w = [T::zero(); D];
        for c in w.iter_mut() {
            *c = StandardNormal.sample(rng);
        }
        let n = vecn::norm(&w);
        if n > T::lit(1e-6) {
            return vecn::scale(&w, T::one() / n);
        }
    }
}

/// Uniformly distributed `(omega1, omega2)` on `S^{2D-1}`.
pub fn sample_sphere_pair<T: Real, R: Rng + ?Sized, const D: usize>(rng: &mut R) -> ([T; D], [T; D])
where
    StandardNormal: Distribution<T>,
{
    loop {
        let mut a = [T::zero(); D];
        let mut b = [T::zero(); D];
        for c in a.iter_mut().chain(b.iter_mut()) {
            *c = StandardNormal.sample(rng);
        }
        let n = (vecn::norm_sq(&a) + vecn::norm_sq(&b)).sqrt();
        if n > T::lit(1e-6) {
            let s = T::one() / n;
            return (vecn::scale(&a, s), vecn::scale(&b, s));
        }
    }
}

/// Sampled impact direction of either family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Impact<T, const D: usize> {
    Binary([T; D]),
    Ternary([T; D], [T; D]),
}

pub fn sample_impact<T: Real, R: Rng + ?Sized, const D: usize>(kind: ImpactKind, rng: &mut R) -> Impact<T, D>
where
    StandardNormal: Distribution<T>,
{
    match kind {
        ImpactKind::Binary => Impact::Binary(sample_sphere(rng)),
        ImpactKind::Ternary => {
            let (a, b) = sample_sphere_pair(rng);
            Impact::Ternary(a, b)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binary_example() {
        let h = 0.5f64.sqrt();
        let (vp, v1p) = binary_map(&[0.0, 0.0], &[2.0, 0.0], &[h, h]).unwrap();
        assert_abs_diff_eq!(vp[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(vp[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v1p[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v1p[1], -1.0, epsilon = 1e-15);
    }

    #[test]
    fn ternary_example() {
        let h = 0.5f64.sqrt();
        let (vs, v1s, v2s) = ternary_map(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 0.0], &[h, 0.0], &[0.0, h]).unwrap();
        let expect = [[0.5, 0.5], [0.5, 0.0], [0.0, -0.5]];
        for (got, want) in [vs, v1s, v2s].iter().zip(expect.iter()) {
            assert_abs_diff_eq!(got[0], want[0], epsilon = 1e-15);
            assert_abs_diff_eq!(got[1], want[1], epsilon = 1e-15);
        }
        assert_abs_diff_eq!(u_tilde_mag(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 0.0]), 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn rejects_non_unit_directions() {
        assert!(matches!(binary_map(&[0.0, 0.0], &[1.0, 0.0], &[1.0, 1.0]), Err(Error::NotUnit(_))));
        assert!(ternary_map(&[0.0; 3], &[1.0; 3], &[0.0; 3], &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn zero_relative_velocity_is_fixed() {
        let f = BinaryFrame::new([0.3, -0.2], [0.3, -0.2], [1.0, 0.0]).unwrap();
        assert_eq!(f.vp, f.v);
        assert_eq!(f.v1p, f.v1);
    }

    #[test]
    fn single_precision_map() {
        let f = BinaryFrame::<f32, 3>::new([0.1, 0.2, 0.3], [-1.0, 0.5, 2.0], [0.0, 0.6, 0.8]).unwrap();
        assert!(f.energy_residual() < 1e-6);
        assert!(f.momentum_residual() < 1e-6);
    }

    fn vel3() -> impl Strategy<Value = [f64; 3]> {
        prop::array::uniform3(-8.0f64..8.0)
    }

    proptest! {
        #[test]
        fn binary_invariants(v in vel3(), v1 in vel3(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w: [f64; 3] = sample_sphere(&mut rng);
            let f = BinaryFrame::new(v, v1, w).unwrap();
            prop_assert!(f.momentum_residual() <= 1e-12);
            prop_assert!(f.energy_residual() <= 1e-12);
            prop_assert!(f.specular_residual() <= 1e-12);
            prop_assert!(f.involution_residual().unwrap() <= 1e-12);
        }

        #[test]
        fn ternary_invariants(v in vel3(), v1 in vel3(), v2 in vel3(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w1, w2): ([f64; 3], [f64; 3]) = sample_sphere_pair(&mut rng);
            let f = TernaryFrame::new(v, v1, v2, w1, w2).unwrap();
            prop_assert!(f.momentum_residual() <= 1e-12);
            prop_assert!(f.energy_residual() <= 1e-12);
            prop_assert!(f.specular_residual() <= 1e-12);
            prop_assert!(f.u_tilde_residual() <= 1e-12);
            prop_assert!(f.involution_residual().unwrap() <= 1e-12);
        }
    }
}
