//! A-priori constants, smallness condition and numerical certificates.
//!
//! # The dimensional constant `C_d`
//!
//! Every inequality below carries the same constant `C_d`. The shipped value
//! is the largest of the explicit constants met while bounding the
//! convolutions `int |v - v1|^q e^{-beta |v1|^2} dv1` and
//! `int int |u~|^q e^{-beta (|v1|^2 + |v2|^2)} dv1 dv2` and the time averages:
//!
//! * binary, `q > 0`: `|u|^q <= |v|^q + |v1|^q` gives `pi^{d/2}`, `|B_1|` and
//!   `c_1 = |S^{d-1}| Gamma((d+1)/2) / 2`;
//! * binary, `q <= 0`: splitting at `|u| = 1` gives `pi^{d/2}` and `|S^{d-1}|`;
//! * ternary, `q > 0`: `|u~|^q <= 2 (|v|^q + |v1|^q + |v2|^q)` gives `2 pi^d`,
//!   `4 pi^{d/2} |B_1|` and `4 pi^{d/2} c_1`;
//! * ternary, `q <= 0`: `|u~| >= |u|` in `R^{2d}` gives `pi^d` and `|S^{2d-1}|`;
//! * time averages: the time integral of a traveling Maxwellian contributes
//!   `sqrt(pi)` (binary) and `sqrt(3 pi)` (ternary, from `|u~| <= sqrt(3) |u|`)
//!   in front of the `q <= 0` convolution constants.
//!
//! The half-line bound `sqrt(pi)/2 alpha^{-1/2} |u0|^{-1}` holds only when
//! `x0 . u0 <= 0`; for `x0` ahead on the ray the integral approaches twice
//! that. The time averages therefore use the whole-line value
//! [`time_lemma_line_bound`].
//!
//! For `d = 2` this is `2 pi^2 sqrt(3 pi)`, for `d = 3` it is `8 pi^{5/2}`.

use serde::Serialize;

use crate::cross_sections::{AngularNorms, KernelConfig};
use crate::error::{Error, Result};
use crate::operators::CollisionOperators;
use crate::phase_space::PhaseDensity;
use crate::quadrature::{
    ball_volume, bessel_i0_scaled, composite_gl, gamma_half_integer, gauss_legendre_on, sinhc_scaled, sphere_area,
};
use crate::scalar::{vecn, Real};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

/// Choice of the dimensional constant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CdMode {
    /// Explicit value validated by the certificates.
    Shipped,
    /// `C_d = 1`, used to compare formulas in isolation.
    Normalized,
}

/// Candidate constants whose maximum is the shipped `C_d`.
pub fn c_d_candidates(d: usize) -> Vec<(&'static str, f64)> {
    let pi = std::f64::consts::PI;
    let df = d as f64;
    let half = pi.powf(df / 2.0);
    let full = pi.powf(df);
    let ball = ball_volume(d);
    let s1 = sphere_area(d);
    let s2 = sphere_area(2 * d);
    let c1 = s1 * gamma_half_integer((df + 1.0) / 2.0) / 2.0;
    vec![
        ("binary gaussian mass", half),
        ("binary unit ball", ball),
        ("binary first moment", c1),
        ("binary singular core", s1),
        ("ternary gaussian mass q>0", 2.0 * full),
        ("ternary unit ball q>0", 4.0 * half * ball),
        ("ternary first moment q>0", 4.0 * half * c1),
        ("ternary gaussian mass q<=0", full),
        ("ternary singular core", s2),
        ("binary time average", pi.sqrt() * half.max(s1)),
        ("ternary time average", (3.0 * pi).sqrt() * full.max(s2)),
    ]
}

/// Shipped `C_d` (maximum of [`c_d_candidates`]).
pub fn shipped_c_d(d: usize) -> f64 {
    c_d_candidates(d).into_iter().map(|(_, c)| c).fold(0.0, f64::max)
}

pub fn c_d(d: usize, mode: CdMode) -> f64 {
    match mode {
        CdMode::Shipped => shipped_c_d(d),
        CdMode::Normalized => 1.0,
    }
}

fn check_beta<T: Real>(beta: T) -> Result<()> {
    if !(beta > T::zero() && beta.is_finite()) {
        return Err(Error::InvalidParameter(format!("beta = {beta} must be positive")));
    }
    Ok(())
}

/// Binary convolution constant `K~2(beta, q)`, `q in (-d, 1]`.
pub fn ktilde2<T: Real>(d: usize, beta: T, q: T, c_d: T) -> Result<T> {
    check_beta(beta)?;
    let df = T::from_usize_lossy(d);
    if !(q > -df && q <= T::one()) {
        return Err(Error::InvalidParameter(format!("q2 = {q} outside (-d, 1]")));
    }
    let half = T::lit(0.5);
    Ok(if q > T::zero() {
        c_d * (T::one() + beta.powf(-df * half) + beta.powf(-(df + T::one()) * half))
    } else {
        c_d * (beta.powf(-df * half) + T::one() / (df + q))
    })
}

/// Ternary convolution constant `K~3(beta, q)`, `q in (-2d, 1]`.
pub fn ktilde3<T: Real>(d: usize, beta: T, q: T, c_d: T) -> Result<T> {
    check_beta(beta)?;
    let df = T::from_usize_lossy(d);
    let two_d = df + df;
    if !(q > -two_d && q <= T::one()) {
        return Err(Error::InvalidParameter(format!("q3 = {q} outside (-2d, 1]")));
    }
    Ok(if q > T::zero() {
        c_d * (T::one() + beta.powf(-df) + beta.powf(-(two_d + T::one()) * T::lit(0.5)))
    } else {
        c_d * (beta.powf(-df) + T::one() / (two_d + q))
    })
}

/// `K_beta = C_d [||b2|| (beta^{-d/2} + 1/(d + gamma2 - 1)) + ||b3|| (beta^{-d} + 1/(2d + gamma3 - 1))]`.
pub fn k_beta<T: Real>(d: usize, beta: T, gamma2: T, gamma3: T, norms: &AngularNorms<T>, c_d: T) -> Result<T> {
    check_beta(beta)?;
    let df = T::from_usize_lossy(d);
    let one = T::one();
    let e2 = df + gamma2 - one;
    let e3 = df + df + gamma3 - one;
    if !(e2 > T::zero() && e3 > T::zero()) {
        return Err(Error::InvalidParameter("kernel exponents outside the admissible range".into()));
    }
    Ok(c_d
        * (norms.b2 * (beta.powf(-df * T::lit(0.5)) + one / e2) + norms.b3 * (beta.powf(-df) + one / e3)))
}

/// `lambda = min(alpha^{1/2} / (24 K), alpha^{1/4} / (2 sqrt(6 K)))`.
pub fn lambda<T: Real>(alpha: T, k: T) -> T {
    let a = alpha.sqrt() / (T::lit(24.0) * k);
    let b = alpha.sqrt().sqrt() / (T::lit(2.0) * (T::lit(6.0) * k).sqrt());
    a.min(b)
}

/// Smallness threshold `alpha^{1/2} / (48 K (1 + alpha^{1/4} / (2 sqrt(6 K))))`.
pub fn smallness_threshold<T: Real>(alpha: T, k: T) -> T {
    alpha.sqrt() / (T::lit(48.0) * k * (T::one() + alpha.sqrt().sqrt() / (T::lit(2.0) * (T::lit(6.0) * k).sqrt())))
}

/// `A = K alpha^{-1/2} (1 + alpha^{1/4} / (2 sqrt(6 K)))`.
pub fn a_coefficient<T: Real>(alpha: T, k: T) -> T {
    k / alpha.sqrt() * (T::one() + alpha.sqrt().sqrt() / (T::lit(2.0) * (T::lit(6.0) * k).sqrt()))
}

/// Outcome of the smallness check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SmallnessReport<T> {
    pub f0_norm: T,
    pub threshold: T,
    /// `1 - 48 A ||f0||`
    pub discriminant: T,
    pub accepted: bool,
    /// Smaller root of `12 A C^2 - C + ||f0|| = 0`, when real.
    pub c_out: Option<T>,
}

/// Every constant controlling the bracket iteration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WellposednessConstants<T> {
    pub dim: usize,
    pub alpha: T,
    pub beta: T,
    pub gamma2: T,
    pub gamma3: T,
    pub c_d_mode: CdMode,
    pub c_d: T,
    pub norm_b2: T,
    pub norm_b3: T,
    /// `K~2(beta, gamma2)`
    pub ktilde2: T,
    /// `K~3(beta, gamma3)`
    pub ktilde3: T,
    pub k_beta: T,
    pub lambda: T,
    pub threshold: T,
}

impl<T: Real> WellposednessConstants<T> {
    pub fn compute(alpha: T, beta: T, kernel: &KernelConfig<T>, norms: &AngularNorms<T>, mode: CdMode) -> Result<Self> {
        if !(alpha > T::zero() && alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("alpha = {alpha} must be positive")));
        }
        let d = kernel.dim();
        let cd = T::lit(c_d(d, mode));
        let k = k_beta(d, beta, kernel.gamma2(), kernel.gamma3(), norms, cd)?;
        if !(k > T::zero()) {
            return Err(Error::InvalidParameter("K_beta vanishes".into()));
        }
        Ok(Self {
            dim: d,
            alpha,
            beta,
            gamma2: kernel.gamma2(),
            gamma3: kernel.gamma3(),
            c_d_mode: mode,
            c_d: cd,
            norm_b2: norms.b2,
            norm_b3: norms.b3,
            ktilde2: ktilde2(d, beta, kernel.gamma2(), cd)?,
            ktilde3: ktilde3(d, beta, kernel.gamma3(), cd)?,
            k_beta: k,
            lambda: lambda(alpha, k),
            threshold: smallness_threshold(alpha, k),
        })
    }

    pub fn a_coefficient(&self) -> T {
        a_coefficient(self.alpha, self.k_beta)
    }

    /// Checks `||f0|| < threshold` and computes `C_out`.
    pub fn smallness(&self, f0_norm: T) -> SmallnessReport<T> {
        let a = self.a_coefficient();
        let disc = T::one() - T::lit(48.0) * a * f0_norm;
        let c_out = if disc >= T::zero() {
            // rationalized smaller root, accurate for small ||f0||
            Some(T::lit(2.0) * f0_norm / (T::one() + disc.sqrt()))
        } else {
            None
        };
        SmallnessReport {
            f0_norm,
            threshold: self.threshold,
            discriminant: disc,
            accepted: f0_norm < self.threshold && disc > T::zero(),
            c_out,
        }
    }

    /// `12 K alpha^{-1/2} (C + C^2)`.
    pub fn contraction_factor(&self, c: T) -> T {
        T::lit(12.0) * self.k_beta / self.alpha.sqrt() * (c + c * c)
    }
}

/// Worst case of one certificate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Certificate {
    pub name: String,
    pub samples: usize,
    /// Largest `lhs / bound`.
    pub worst_ratio: f64,
    pub violations: usize,
}

impl Certificate {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    fn from_ratios(name: String, ratios: impl IntoIterator<Item = f64>) -> Self {
        let mut samples = 0;
        let mut worst = 0.0f64;
        let mut violations = 0;
        for r in ratios {
            samples += 1;
            if !(r <= 1.0) {
                violations += 1;
            }
            worst = if r.is_nan() { f64::NAN } else { worst.max(r) };
        }
        Certificate { name, samples, worst_ratio: worst, violations }
    }
}

/// `exp(-z) * (spherical mean of exp(2 z theta . e))` over `S^{d-1}`, times `|S^{d-1}|`.
fn scaled_sphere_mean(d: usize, z: f64) -> f64 {
    match d {
        2 => 2.0 * std::f64::consts::PI * bessel_i0_scaled(z),
        3 => 4.0 * std::f64::consts::PI * sinhc_scaled(z),
        _ => panic!("dimension {d} not supported"),
    }
}

/// Integrates `r^{p} phi(r)` on `[0, inf)` where `phi` decays like a Gaussian
/// centred at `center` with width `width`; `p > -1`.
fn radial_integral(p: f64, center: f64, width: f64, phi: impl Fn(f64) -> f64) -> f64 {
    let a = (0.5 * width).min(1.0);
    // geometric panels toward the origin; on the innermost piece phi is
    // nearly constant and r = b s^{1/(p+1)} absorbs the power
    let levels = 48;
    let mut acc = 0.0;
    let mut top = a;
    for _ in 0..levels {
        let bottom = 0.5 * top;
        for (r, w) in gauss_legendre_on(10, bottom, top) {
            acc += w * r.powf(p) * phi(r);
        }
        top = bottom;
    }
    let e = p + 1.0;
    let inner: f64 = gauss_legendre_on(8, 0.0, 1.0).into_iter().map(|(s, w)| w * phi(top * s.powf(1.0 / e))).sum();
    acc += inner * top.powf(e) / e;
    let hi = center + 12.0 * width;
    if hi > a {
        let panels = (((hi - a) / (0.25 * width)).ceil() as usize).max(4);
        for (r, w) in composite_gl(panels, 8, a, hi) {
            acc += w * r.powf(p) * phi(r);
        }
    }
    acc
}

/// Polar-coordinate evaluation of [`convolution_lhs_binary`].
///
/// Reduced to a radial integral around `v` with the spherical mean written
/// through `I_0` (d = 2) or `sinh` (d = 3); `q > -d`.
pub fn convolution_lhs_binary_polar(d: usize, beta: f64, q: f64, speed: f64) -> f64 {
    let s = speed.abs();
    let width = 1.0 / beta.sqrt();
    radial_integral(q + d as f64 - 1.0, s, width, |r| {
        (-beta * (r - s) * (r - s)).exp() * scaled_sphere_mean(d, 2.0 * beta * r * s)
    })
}

/// Polar-coordinate evaluation of [`convolution_lhs_ternary`].
///
/// With `a = v1 - v`, `b = v2 - v`, `p = (a + b)/sqrt 2`, `m = sqrt(3/2) (a - b)`
/// the integrand becomes `(|p|^2 + |m|^2)^{q/2} exp(-beta |p + sqrt 2 v|^2) exp(-beta |m|^2 / 3)`
/// with Jacobian `3^{-d/2}`; the two radii are integrated in polar form.
pub fn convolution_lhs_ternary_polar(d: usize, beta: f64, q: f64, speed: f64) -> f64 {
    let w = 2f64.sqrt() * speed.abs();
    let df = d as f64;
    let area = sphere_area(d);
    let pi = std::f64::consts::PI;
    // angle between the p-radius and m-radius axes
    let phis = composite_gl(16, 12, 0.0, 0.5 * pi);
    let width = (3.0 / beta).sqrt();
    let mut acc = 0.0;
    for (phi, wphi) in phis {
        let (sp, cp) = phi.sin_cos();
        let ang = (cp * sp).powf(df - 1.0);
        if ang == 0.0 {
            continue;
        }
        let center = if cp > 1e-12 { w / cp } else { 0.0 };
        let center = center.min(w + 12.0 * width);
        let radial = radial_integral(q + 2.0 * df - 1.0, center, width, |r| {
            let rho = r * cp;
            let mu = r * sp;
            (-beta * (rho - w) * (rho - w)).exp() * scaled_sphere_mean(d, 2.0 * beta * rho * w) * area * (-beta * mu * mu / 3.0).exp()
        });
        acc += wphi * ang * radial;
    }
    acc / 3f64.powf(df / 2.0)
}

/// Gaussian average of `A^{q/2}` from its Laplace transform.
///
/// `log_ratio(t) = ln(phi(t) / phi(0))` with `phi(t) = int exp(-t A) dmu`,
/// `mass = phi(0)` and `phi(t) ~ t^{-decay}` for large `t`.
/// Uses `A^{-s} = Gamma(s)^{-1} int t^{s-1} e^{-tA} dt` for `q < 0` and
/// `A^{s} = s / Gamma(1 - s) int t^{-s-1} (1 - e^{-tA}) dt` for `0 < q < 2`,
/// integrated by the trapezoid rule in `y = ln t` with analytic tails.
fn laplace_moment(q: f64, mass: f64, decay: f64, log_ratio: impl Fn(f64) -> f64) -> f64 {
    const Y0: f64 = -40.0;
    const Y1: f64 = 40.0;
    const STEPS: usize = 1600;
    let h = (Y1 - Y0) / STEPS as f64;
    let trapezoid = |g: &dyn Fn(f64) -> f64| {
        let mut acc = 0.5 * (g(Y0) + g(Y1));
        for i in 1..STEPS {
            acc += g(Y0 + i as f64 * h);
        }
        acc * h
    };
    // beyond [Y0, Y1] the integrand is a pure exponential; the tails are the
    // matching geometric trapezoid sums so the whole rule is one infinite sum
    let tail = |g_end: f64, rate: f64| h * g_end * (0.5 + 1.0 / (rate * h).exp_m1());
    if q == 0.0 {
        mass
    } else if q < 0.0 {
        let s = -0.5 * q;
        let g = |y: f64| (s * y + log_ratio(y.exp())).exp();
        let total = trapezoid(&g) + tail(g(Y0), s) + tail(g(Y1), decay - s);
        mass * total / libm::tgamma(s)
    } else {
        let s = 0.5 * q;
        let g = |y: f64| -(-s * y).exp() * log_ratio(y.exp()).exp_m1();
        let total = trapezoid(&g) + tail(g(Y0), 1.0 - s) + tail(g(Y1), s);
        mass * s * total / libm::tgamma(1.0 - s)
    }
}

fn check_moment_exponent(q: f64, lower: f64) {
    assert!(q > lower && q < 2.0, "exponent {q} outside ({lower}, 2)");
}

/// `int_{R^d} |v1 - v|^q exp(-beta |v1|^2) dv1` as a function of `|v|`, `q in (-d, 2)`.
pub fn convolution_lhs_binary(d: usize, beta: f64, q: f64, speed: f64) -> f64 {
    let df = d as f64;
    check_moment_exponent(q, -df);
    let pi = std::f64::consts::PI;
    let v2 = speed * speed;
    let mass = (pi / beta).powf(0.5 * df);
    laplace_moment(q, mass, 0.5 * df, |t| -0.5 * df * (t / beta).ln_1p() - t * beta * v2 / (t + beta))
}

/// `int int |u~|^q exp(-beta (|v1|^2 + |v2|^2)) dv1 dv2` as a function of `|v|`, `q in (-2d, 2)`.
///
/// After `p = (a + b)/sqrt 2`, `m = sqrt(3/2) (a - b)` with `a = v1 - v`,
/// `b = v2 - v`, `|u~|^2 = |p|^2 + |m|^2` and both Gaussians factorize.
pub fn convolution_lhs_ternary(d: usize, beta: f64, q: f64, speed: f64) -> f64 {
    let df = d as f64;
    check_moment_exponent(q, -2.0 * df);
    let pi = std::f64::consts::PI;
    let w2 = 2.0 * speed * speed;
    let mass = (pi / beta).powf(df);
    laplace_moment(q, mass, df, |t| {
        -0.5 * df * ((t / beta).ln_1p() + (3.0 * t / beta).ln_1p()) - t * beta * w2 / (t + beta)
    })
}

/// Convolution certificates at the given speeds: `lhs <= K~(beta, q) (1 + |v|^{q_+})`.
pub fn verify_convolution(d: usize, beta: f64, q2: f64, q3: f64, speeds: &[f64], c_d: f64) -> Result<(Certificate, Certificate)> {
    let k2 = ktilde2(d, beta, q2, c_d)?;
    let k3 = ktilde3(d, beta, q3, c_d)?;
    let bin: Vec<f64> =
        speeds.par_iter().map(|&s| convolution_lhs_binary(d, beta, q2, s) / (k2 * (1.0 + s.powf(q2.max(0.0))))).collect();
    let ter: Vec<f64> =
        speeds.par_iter().map(|&s| convolution_lhs_ternary(d, beta, q3, s) / (k3 * (1.0 + s.powf(q3.max(0.0))))).collect();
    let bin = Certificate::from_ratios(format!("convolution binary beta={beta} q={q2}"), bin);
    let ter = Certificate::from_ratios(format!("convolution ternary beta={beta} q={q3}"), ter);
    Ok((bin, ter))
}

/// `int_0^inf exp(-alpha |x0 - tau u0|^2) d tau` by composite Gauss-Legendre
/// quadrature on the region where the integrand is not negligible.
pub fn time_integral<const D: usize>(x0: &[f64; D], u0: &[f64; D], alpha: f64) -> Result<f64> {
    let un = vecn::norm(u0);
    if !(un > 0.0) {
        return Err(Error::InvalidParameter("u0 must be nonzero".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidParameter("alpha must be positive".into()));
    }
    let scale = 1.0 / (alpha.sqrt() * un);
    let tau0 = vecn::dot(x0, u0) / (un * un);
    let lo = (tau0 - 12.0 * scale).max(0.0);
    let hi = (tau0 + 12.0 * scale).max(12.0 * scale);
    let panels = ((hi - lo) / (0.5 * scale)).ceil().max(1.0) as usize;
    let mut acc = 0.0;
    for (tau, w) in composite_gl(panels, 10, lo, hi) {
        let d = vecn::axpy(x0, -tau, u0);
        acc += w * (-alpha * vecn::norm_sq(&d)).exp();
    }
    Ok(acc)
}

/// `sqrt(pi)/2 alpha^{-1/2} |u0|^{-1}`.
pub fn time_lemma_bound<const D: usize>(u0: &[f64; D], alpha: f64) -> f64 {
    0.5 * std::f64::consts::PI.sqrt() / (alpha.sqrt() * vecn::norm(u0))
}

/// `sqrt(pi) alpha^{-1/2} |u0|^{-1}`, the integral over the whole line; valid for every `x0`.
pub fn time_lemma_line_bound<const D: usize>(u0: &[f64; D], alpha: f64) -> f64 {
    2.0 * time_lemma_bound(u0, alpha)
}

/// `(integral, half-line bound)` of the time lemma.
pub fn time_lemma<const D: usize>(x0: &[f64; D], u0: &[f64; D], alpha: f64) -> Result<(f64, f64)> {
    Ok((time_integral(x0, u0, alpha)?, time_lemma_bound(u0, alpha)))
}

/// Names of the operator inequalities checked by [`verify_time_average`].
pub const TIME_AVERAGE_OPERATORS: [&str; 6] = ["L2", "G2", "L3", "G3", "L", "G"];

/// Time-average certificates: for each point `(x, v)` and each operator,
/// `int_0^{t_end} op^#(tau, x, v) d tau <= K_beta alpha^{-1/2} M(x, v) P`
/// where `P` is the product of input norms appearing in the bound.
pub fn verify_time_average<T: Real, const D: usize>(
    ops: &CollisionOperators<T, D>,
    f: &PhaseDensity<T, D>,
    g: &PhaseDensity<T, D>,
    h: &PhaseDensity<T, D>,
    points: &[([T; D], [T; D])],
    t_end: T,
    k_beta: T,
) -> Result<Vec<Certificate>>
where
    StandardNormal: Distribution<T>,
{
    let env = ops.envelope();
    let (nf, ng, nh) = (f.m_norm_sup().as_f64(), g.m_norm_sup().as_f64(), h.m_norm_sup().as_f64());
    let scale = k_beta.as_f64() / env.alpha().as_f64().sqrt();
    let products = [nf * ng, nf * ng, nf * ng * nh, nf * ng * nh, nf * ng * (1.0 + nh), nf * ng * (1.0 + nh)];
    let te = t_end.as_f64();
    // the integrands are smooth in tau; unit panels with 8 nodes resolve them
    let panels = (te.ceil() as usize).max(1);
    let taus = composite_gl(panels, 8, 0.0, te);
    let mut ratios: Vec<Vec<f64>> = vec![Vec::with_capacity(points.len()); 6];
    for (x, v) in points {
        let mut lhs = [0.0f64; 6];
        for (tau, w) in &taus {
            let pv = ops.eval_point(T::lit(*tau), x, v, f, g, h)?;
            let vals = [pv.l2(), pv.g2, pv.l3(), pv.g3, pv.loss(), pv.gain()];
            for (l, val) in lhs.iter_mut().zip(vals) {
                *l += w * val.as_f64();
            }
        }
        let m = env.eval(x, v).as_f64();
        for i in 0..6 {
            let bound = scale * m * products[i];
            ratios[i].push(if bound > 0.0 { lhs[i] / bound } else if lhs[i] > 0.0 { f64::INFINITY } else { 0.0 });
        }
    }
    Ok(ratios
        .into_iter()
        .zip(TIME_AVERAGE_OPERATORS)
        .map(|(r, name)| Certificate::from_ratios(format!("time average {name}"), r))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cross_sections::{BinaryAngular, TernaryAngular};
    use approx::assert_relative_eq;

    #[test]
    fn normalized_constants() {
        assert_relative_eq!(ktilde2(2, 1.0, -1.0, 1.0).unwrap(), 2.0);
        let norms = AngularNorms { b2: 1.0, b3: 1.0 };
        assert_relative_eq!(k_beta(2, 1.0, 1.0, 1.0, &norms, 1.0).unwrap(), 2.75);
        assert!(ktilde2(2, 1.0, -2.0, 1.0).is_err());
        assert!(ktilde3(2, 1.0, -4.0, 1.0).is_err());
        assert!(ktilde2(2, 0.0, 0.5, 1.0).is_err());
    }

    #[test]
    fn shipped_constant_values() {
        let pi = std::f64::consts::PI;
        assert_relative_eq!(shipped_c_d(2), 2.0 * pi * pi * (3.0 * pi).sqrt(), max_relative = 1e-14);
        assert_relative_eq!(shipped_c_d(3), 8.0 * pi.powf(2.5), max_relative = 1e-14);
    }

    #[test]
    fn c_out_solves_fixed_point() {
        let kernel = KernelConfig::hard_sphere_with_ternary(2).unwrap();
        let norms = AngularNorms { b2: 2.0, b3: 1.3 };
        let c = WellposednessConstants::compute(1.3, 0.7, &kernel, &norms, CdMode::Shipped).unwrap();
        let a = c.a_coefficient();
        for factor in [0.1, 0.5, 0.9, 0.99] {
            let r = c.smallness(factor * c.threshold);
            assert!(r.accepted);
            let co = r.c_out.unwrap();
            assert_relative_eq!(r.f0_norm + 12.0 * a * co * co, co, max_relative = 1e-13);
            assert!(co < c.lambda);
        }
        for factor in [1.01, 1.1] {
            let r = c.smallness(factor * c.threshold);
            assert!(!r.accepted);
            assert!(r.discriminant < 0.0);
        }
    }

    #[test]
    fn threshold_matches_discriminant_root() {
        let c = smallness_threshold(2.0f64, 37.0);
        let a = a_coefficient(2.0f64, 37.0);
        assert_relative_eq!(48.0 * a * c, 1.0, max_relative = 1e-14);
    }

    #[test]
    fn convolution_zero_exponent_is_gaussian_mass() {
        let pi = std::f64::consts::PI;
        for d in [2, 3] {
            for beta in [0.5, 2.0] {
                let want = (pi / beta).powf(d as f64 / 2.0);
                assert_relative_eq!(convolution_lhs_binary(d, beta, 0.0, 0.0), want, max_relative = 1e-10);
                assert_relative_eq!(convolution_lhs_binary(d, beta, 0.0, 3.7), want, max_relative = 1e-10);
                assert_relative_eq!(convolution_lhs_ternary(d, beta, 0.0, 2.2), want * want, max_relative = 1e-10);
                assert_relative_eq!(convolution_lhs_ternary_polar(d, beta, 0.0, 2.2), want * want, max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn convolution_second_moments() {
        // q = 2: exact Gaussian moments
        let pi = std::f64::consts::PI;
        for d in [2usize, 3] {
            let df = d as f64;
            for (beta, s) in [(1.0, 0.0), (0.5, 2.5), (2.0, 7.0)] {
                let mass = (pi / beta).powf(df / 2.0);
                assert_relative_eq!(
                    convolution_lhs_binary_polar(d, beta, 2.0, s),
                    mass * (s * s + df / (2.0 * beta)),
                    max_relative = 1e-9
                );
                assert_relative_eq!(
                    convolution_lhs_ternary_polar(d, beta, 2.0, s),
                    mass * mass * (2.0 * s * s + 2.0 * df / beta),
                    max_relative = 1e-8
                );
            }
        }
    }

    #[test]
    fn laplace_and_polar_agree() {
        for d in [2usize, 3] {
            let df = d as f64;
            for (beta, s) in [(0.5, 0.0), (1.0, 1.3), (2.0, 6.0), (0.5, 9.5)] {
                for q in [-0.9 * df, -0.5, 0.5, 1.0, 1.7] {
                    let a = convolution_lhs_binary(d, beta, q, s);
                    let b = convolution_lhs_binary_polar(d, beta, q, s);
                    assert_relative_eq!(a, b, max_relative = 1e-9);
                }
                for q in [-1.9 * df, -2.9, -1.0, 0.3, 1.0] {
                    let a = convolution_lhs_ternary(d, beta, q, s);
                    let b = convolution_lhs_ternary_polar(d, beta, q, s);
                    assert_relative_eq!(a, b, max_relative = 1e-8);
                }
            }
        }
    }

    #[test]
    fn convolution_singular_core() {
        // beta -> small: int |u|^q e^{-beta |v1|^2} ~ |S^{d-1}| int r^{q+d-1} e^{-beta r^2} dr at v = 0
        let pi = std::f64::consts::PI;
        let q = -1.5;
        let beta = 1.0;
        // int_0^inf r^{q+1} e^{-r^2} dr = Gamma((q+2)/2) / 2 = Gamma(1/4) / 2
        let gamma_quarter = 3.625_609_908_221_908_3;
        assert_relative_eq!(convolution_lhs_binary(2, beta, q, 0.0), 2.0 * pi * gamma_quarter / 2.0, max_relative = 1e-9);
    }

    #[test]
    fn time_lemma_equality_case() {
        let (i, b) = time_lemma(&[0.0, 0.0], &[2.0, 0.0], 4.0).unwrap();
        assert_relative_eq!(i, std::f64::consts::PI.sqrt() / 8.0, max_relative = 1e-12);
        assert_relative_eq!(i, b, max_relative = 1e-12);
        assert!(time_lemma(&[1.0, 0.0], &[0.0, 0.0], 1.0).is_err());
    }

    /// `sqrt(pi)/(2 sqrt(alpha) |u0|) exp(-alpha |x_perp|^2) erfc(-sqrt(alpha) x_par)`.
    fn time_integral_closed<const D: usize>(x0: &[f64; D], u0: &[f64; D], alpha: f64) -> f64 {
        let un = vecn::norm(u0);
        let par = vecn::dot(x0, u0) / un;
        let perp2 = (vecn::norm_sq(x0) - par * par).max(0.0);
        time_lemma_bound(u0, alpha) * (-alpha * perp2).exp() * statrs::function::erf::erfc(-alpha.sqrt() * par)
    }

    #[test]
    fn time_integral_matches_erfc_form() {
        let cases: [([f64; 3], [f64; 3], f64); 4] = [
            ([0.3, -0.2, 1.0], [1.0, 0.5, -0.1], 1.0),
            ([5.0, 0.0, 0.0], [1.0, 0.0, 0.0], 1.0),
            ([-2.0, 1.0, 0.0], [0.1, 0.0, 0.2], 3.0),
            ([0.0, 0.0, 0.0], [0.0, 7.0, 0.0], 0.2),
        ];
        for (x0, u0, alpha) in cases {
            assert_relative_eq!(time_integral(&x0, &u0, alpha).unwrap(), time_integral_closed(&x0, &u0, alpha), max_relative = 1e-11);
        }
    }

    #[test]
    fn half_line_bound_fails_ahead_on_the_ray() {
        // x0 ahead of the particle: closest approach at tau = 5, integral -> sqrt(pi)
        let (i, half) = time_lemma(&[5.0, 0.0], &[1.0, 0.0], 1.0).unwrap();
        assert!(i / half > 1.99);
        assert!(i <= time_lemma_line_bound(&[1.0, 0.0], 1.0));
    }

    proptest::proptest! {
        #[test]
        fn time_lemma_bounds(
            x in proptest::array::uniform2(-5.0f64..5.0),
            u in proptest::array::uniform2(-5.0f64..5.0),
            la in -1.0f64..1.0,
        ) {
            proptest::prop_assume!(vecn::norm(&u) > 1e-2);
            let alpha = 10f64.powf(la);
            let (i, half) = time_lemma(&x, &u, alpha).unwrap();
            proptest::prop_assert!(i <= time_lemma_line_bound(&u, alpha) * (1.0 + 1e-12));
            if vecn::dot(&x, &u) <= 0.0 {
                proptest::prop_assert!(i <= half * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn kernel_presets_for_constants() {
        let k = KernelConfig::new(2, 0.0, BinaryAngular::maxwell(2), 0.0, TernaryAngular::Zero).unwrap();
        let norms = k.angular_norms().unwrap();
        let c = WellposednessConstants::compute(1.0, 1.0, &k, &norms, CdMode::Normalized).unwrap();
        // ||b2|| = 1, gamma2 = 0: 1 + 1/(2 - 1) = 2
        assert_relative_eq!(c.k_beta, 2.0, max_relative = 1e-12);
    }
}
