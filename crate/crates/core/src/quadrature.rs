//! One-dimensional rules, sphere rules and special functions used by the
//! operators and the estimates.

use std::sync::OnceLock;

use crate::scalar::Real;

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "Gauss-Legendre needs at least one node");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let mut p0 = 1.0;
            let mut p1 = 0.0;
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

const CACHED_ORDERS: usize = 64;

/// Cached Gauss-Legendre rule for `n < 64`.
fn gauss_legendre_cached(n: usize) -> std::borrow::Cow<'static, (Vec<f64>, Vec<f64>)> {
    static CACHE: [OnceLock<(Vec<f64>, Vec<f64>)>; CACHED_ORDERS] = [const { OnceLock::new() }; CACHED_ORDERS];
    if n < CACHED_ORDERS {
        std::borrow::Cow::Borrowed(CACHE[n].get_or_init(|| gauss_legendre(n)))
    } else {
        std::borrow::Cow::Owned(gauss_legendre(n))
    }
}

/// Gauss-Legendre rule mapped to `[a, b]`.
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    let rule = gauss_legendre_cached(n);
    let (x, w) = (&rule.0, &rule.1);
    let h = 0.5 * (b - a);
    x.iter().zip(w.iter()).map(|(xi, wi)| (a + h * (xi + 1.0), h * wi)).collect()
}

/// Composite Gauss-Legendre rule with `panels` equal panels on `[a, b]`.
pub fn composite_gl(panels: usize, order: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    let h = (b - a) / panels as f64;
    (0..panels).flat_map(|p| gauss_legendre_on(order, a + p as f64 * h, a + (p + 1) as f64 * h)).collect()
}

/// Integrates `f` on `[a, b]` with a composite Gauss-Legendre rule.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize, order: usize) -> f64 {
    composite_gl(panels, order, a, b).iter().map(|(x, w)| w * f(*x)).sum()
}

/// `exp(-z) I_0(z)` for `z >= 0`.
pub fn bessel_i0_scaled(z: f64) -> f64 {
    let z = z.abs();
    if z < 15.0 {
        let q = 0.25 * z * z;
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1.0;
        while term > 1e-17 * sum {
            term *= q / (k * k);
            sum += term;
            k += 1.0;
        }
        sum * (-z).exp()
    } else {
        // asymptotic series; terms decrease while 2k-1 < 8z
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..30 {
            let a = (2 * k - 1) as f64;
            term *= a * a / (8.0 * z * k as f64);
            sum += term;
            if term.abs() < 1e-17 * sum {
                break;
            }
        }
        sum / (2.0 * std::f64::consts::PI * z).sqrt()
    }
}

/// `exp(-z) sinh(z) / z` for `z >= 0`.
pub fn sinhc_scaled(z: f64) -> f64 {
    let z = z.abs();
    if z < 1e-4 {
        (1.0 + z * z / 6.0) * (-z).exp()
    } else {
        (1.0 - (-2.0 * z).exp()) / (2.0 * z)
    }
}

/// `|S^{n-1}|`, the surface area of the unit sphere in `R^n`.
pub fn sphere_area(n: usize) -> f64 {
    let pi = std::f64::consts::PI;
    match n {
        0 => 0.0,
        1 => 2.0,
        2 => 2.0 * pi,
        _ => 2.0 * pi / (n as f64 - 2.0) * sphere_area(n - 2),
    }
}

/// Volume of the unit ball in `R^n`.
pub fn ball_volume(n: usize) -> f64 {
    sphere_area(n) / n as f64
}

/// Gamma function for positive half-integers and integers.
pub fn gamma_half_integer(x: f64) -> f64 {
    let twice = (2.0 * x).round();
    assert!((2.0 * x - twice).abs() < 1e-12 && x > 0.0, "argument must be a positive half-integer");
    let mut x = x;
    let mut acc = 1.0;
    while x > 1.0 + 1e-12 {
        x -= 1.0;
        acc *= x;
    }
    if (x - 0.5).abs() < 1e-12 {
        acc * std::f64::consts::PI.sqrt()
    } else {
        acc
    }
}

/// Quadrature rule on `S^{D-1}` with weights summing to `|S^{D-1}|`.
///
/// `D = 2`: periodic trapezoid with `n` angles. `D = 3`: Gauss-Legendre in
/// the polar cosine with `n / 2` nodes times a periodic trapezoid with `n`
/// azimuths.
pub fn sphere_rule<T: Real, const D: usize>(n: usize) -> Vec<([T; D], T)> {
    let pi = std::f64::consts::PI;
    let mut out = Vec::new();
    match D {
        2 => {
            let w = 2.0 * pi / n as f64;
            for i in 0..n {
                let th = (i as f64 + 0.5) * w;
                let mut p = [T::zero(); D];
                p[0] = T::lit(th.cos());
                p[1] = T::lit(th.sin());
                out.push((p, T::lit(w)));
            }
        }
        3 => {
            let (zs, ws) = gauss_legendre((n / 2).max(2));
            let wphi = 2.0 * pi / n as f64;
            for (z, wz) in zs.iter().zip(ws.iter()) {
                let s = (1.0 - z * z).sqrt();
                for i in 0..n {
                    let ph = (i as f64 + 0.5) * wphi;
                    let mut p = [T::zero(); D];
                    p[0] = T::lit(s * ph.cos());
                    p[1] = T::lit(s * ph.sin());
                    p[2] = T::lit(*z);
                    out.push((p, T::lit(wz * wphi)));
                }
            }
        }
        _ => panic!("sphere rules are provided for D = 2, 3"),
    }
    out
}

/// Quadrature rule on `S^{2D-1}` written as `(omega1, omega2) = (cos psi e1, sin psi e2)`
/// with `e1, e2 in S^{D-1}`; weights sum to `|S^{2D-1}|`.
///
/// For `D = 2` the polar angle uses Gauss-Legendre in `s = sin^2 psi`, where the
/// measure is `ds / 2`; for `D = 3` Gauss-Legendre in `psi` with density
/// `cos^2 psi sin^2 psi`.
pub fn sphere_pair_rule<T: Real, const D: usize>(n_psi: usize, n_ang: usize) -> Vec<([T; D], [T; D], T)> {
    let inner = sphere_rule::<f64, D>(n_ang);
    let polar: Vec<(f64, f64, f64)> = if D == 2 {
        gauss_legendre_on(n_psi, 0.0, 1.0).into_iter().map(|(s, w)| ((1.0 - s).sqrt(), s.sqrt(), 0.5 * w)).collect()
    } else {
        gauss_legendre_on(n_psi, 0.0, 0.5 * std::f64::consts::PI)
            .into_iter()
            .map(|(p, w)| {
                let (s, c) = p.sin_cos();
                (c, s, w * (c * s).powi(D as i32 - 1))
            })
            .collect()
    };
    let mut out = Vec::with_capacity(n_psi * inner.len() * inner.len());
    for (c, sn, wp) in polar {
        for (e1, w1) in &inner {
            for (e2, w2) in &inner {
                let mut a = [T::zero(); D];
                let mut b = [T::zero(); D];
                for k in 0..D {
                    a[k] = T::lit(c * e1[k]);
                    b[k] = T::lit(sn * e2[k]);
                }
                out.push((a, b, T::lit(wp * w1 * w2)));
            }
        }
    }
    out
}

/// Radical inverse in base `b` (Halton sequence component).
pub fn radical_inverse(mut i: u64, b: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    let inv = 1.0 / b as f64;
    while i > 0 {
        f *= inv;
        r += f * (i % b) as f64;
        i /= b;
    }
    r
}

const PRIMES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

/// Deterministic, well-spread points on `S^{n-1}` (Halton + Box-Muller), `n <= 8`.
pub fn low_discrepancy_sphere(count: usize, n: usize) -> Vec<Vec<f64>> {
    assert!(n <= PRIMES.len() && n % 2 == 0, "even dimension up to 8");
    (1..=count as u64)
        .map(|i| {
            let mut p = vec![0.0; n];
            for k in 0..n / 2 {
                let u1 = radical_inverse(i, PRIMES[2 * k]).max(1e-300);
                let u2 = radical_inverse(i, PRIMES[2 * k + 1]);
                let r = (-2.0 * u1.ln()).sqrt();
                p[2 * k] = r * (2.0 * std::f64::consts::PI * u2).cos();
                p[2 * k + 1] = r * (2.0 * std::f64::consts::PI * u2).sin();
            }
            let norm = p.iter().map(|c| c * c).sum::<f64>().sqrt();
            p.iter().map(|c| c / norm).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gauss_legendre_exactness() {
        let (x, w) = gauss_legendre(5);
        let m8: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(8)).sum();
        assert_relative_eq!(m8, 2.0 / 9.0, max_relative = 1e-14);
        assert_relative_eq!(w.iter().sum::<f64>(), 2.0, max_relative = 1e-14);
    }

    #[test]
    fn bessel_scaled_against_reference() {
        // reference values of exp(-z) I0(z)
        let table = [
            (0.5, 0.64503527044915),
            (5.0, 0.18354081260932834),
            (12.0, 0.11642622121344044),
            (14.9, 0.10425387282429126),
            (15.1, 0.1035487812057697),
            (18.0, 0.09470629521276411),
            (20.0, 0.089780311884826),
            (30.0, 0.0731459464822373),
            (100.0, 0.03994437929909668),
        ];
        for (z, want) in table {
            assert_relative_eq!(bessel_i0_scaled(z), want, max_relative = 1e-13);
        }
    }

    #[test]
    fn sphere_measures() {
        let pi = std::f64::consts::PI;
        assert_relative_eq!(sphere_area(4), 2.0 * pi * pi, max_relative = 1e-14);
        assert_relative_eq!(sphere_area(6), pi * pi * pi, max_relative = 1e-14);
        let s2: f64 = sphere_rule::<f64, 3>(16).iter().map(|(_, w)| w).sum();
        assert_relative_eq!(s2, 4.0 * pi, max_relative = 1e-13);
        let s3: f64 = sphere_pair_rule::<f64, 2>(3, 8).iter().map(|(_, _, w)| w).sum();
        assert_relative_eq!(s3, 2.0 * pi * pi, max_relative = 1e-13);
        let s5: f64 = sphere_pair_rule::<f64, 3>(12, 16).iter().map(|(_, _, w)| w).sum();
        assert_relative_eq!(s5, pi * pi * pi, max_relative = 1e-12);
        for (a, b, _) in sphere_pair_rule::<f64, 2>(2, 8) {
            let n: f64 = a.iter().chain(b.iter()).map(|c| c * c).sum();
            assert_relative_eq!(n, 1.0, max_relative = 1e-14);
        }
    }

    #[test]
    fn gamma_values() {
        assert_relative_eq!(gamma_half_integer(1.5), std::f64::consts::PI.sqrt() / 2.0, max_relative = 1e-15);
        assert_relative_eq!(gamma_half_integer(4.0), 6.0, max_relative = 1e-15);
    }
}
