//! Binary and ternary collision kernels and their angular norms.

use crate::error::{Error, Result};
use crate::quadrature::{composite_gl, low_discrepancy_sphere, sphere_area, sphere_pair_rule};
use crate::scalar::{vecn, Real};

/// Piecewise-linear table `z -> b(z)`, evaluated through its even part.
#[derive(Clone, Debug, PartialEq)]
pub struct AngularTable<T> {
    z: Vec<T>,
    values: Vec<T>,
}

fn check_axis<T: Real>(axis: &[T], lo: T, hi: T, name: &str) -> Result<()> {
    if axis.len() < 2 {
        return Err(Error::InvalidParameter(format!("table axis {name} needs at least two nodes")));
    }
    if axis.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter(format!("table axis {name} must be strictly increasing")));
    }
    let tol = T::lit(1e-12);
    if axis[0] > lo + tol || axis[axis.len() - 1] < hi - tol {
        return Err(Error::InvalidParameter(format!("table axis {name} must cover [{lo}, {hi}]")));
    }
    Ok(())
}

fn check_values<T: Real>(values: &[T]) -> Result<()> {
    if values.iter().any(|v| !(v.is_finite() && *v >= T::zero())) {
        return Err(Error::InvalidParameter("angular table values must be finite and nonnegative".into()));
    }
    Ok(())
}

/// Linear interpolation weights of `y` on `axis` (clamped to the table range).
fn bracket<T: Real>(axis: &[T], y: T) -> (usize, T) {
    let n = axis.len();
    let y = y.max(axis[0]).min(axis[n - 1]);
    let i = match axis.iter().position(|a| *a > y) {
        Some(0) => 0,
        Some(p) => p - 1,
        None => n - 2,
    }
    .min(n - 2);
    (i, (y - axis[i]) / (axis[i + 1] - axis[i]))
}

impl<T: Real> AngularTable<T> {
    /// The table must cover `[0, 1]`; values on `z < 0` are optional.
    pub fn new(z: Vec<T>, values: Vec<T>) -> Result<Self> {
        if z.len() != values.len() {
            return Err(Error::DimensionMismatch("angular table columns differ in length".into()));
        }
        check_axis(&z, T::zero(), T::one(), "z")?;
        check_values(&values)?;
        Ok(Self { z, values })
    }

    fn raw(&self, y: T) -> T {
        let y = if y < self.z[0] { -y } else { y };
        let (i, th) = bracket(&self.z, y);
        self.values[i] * (T::one() - th) + self.values[i + 1] * th
    }

    /// Symmetrized value `(b(z) + b(-z)) / 2`.
    pub fn eval(&self, z: T) -> T {
        T::lit(0.5) * (self.raw(z) + self.raw(-z))
    }
}

/// Bilinear table `(z, w) -> b(z, w)` on `z in [0, 1]`, `w in [-1/2, 1/2]`, even in `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct AngularTable2<T> {
    z: Vec<T>,
    w: Vec<T>,
    /// Row-major `values[iz * w.len() + iw]`.
    values: Vec<T>,
}

impl<T: Real> AngularTable2<T> {
    pub fn new(z: Vec<T>, w: Vec<T>, values: Vec<T>) -> Result<Self> {
        if values.len() != z.len() * w.len() {
            return Err(Error::DimensionMismatch("ternary angular table is not a full tensor grid".into()));
        }
        check_axis(&z, T::zero(), T::one(), "z")?;
        check_axis(&w, -T::lit(0.5), T::lit(0.5), "w")?;
        check_values(&values)?;
        Ok(Self { z, w, values })
    }

    fn raw(&self, z: T, w: T) -> T {
        let z = if z < self.z[0] { -z } else { z };
        let (i, a) = bracket(&self.z, z);
        let (j, b) = bracket(&self.w, w);
        let nw = self.w.len();
        let v = |ii: usize, jj: usize| self.values[ii * nw + jj];
        let one = T::one();
        v(i, j) * (one - a) * (one - b) + v(i + 1, j) * a * (one - b) + v(i, j + 1) * (one - a) * b + v(i + 1, j + 1) * a * b
    }

    pub fn eval(&self, z: T, w: T) -> T {
        T::lit(0.5) * (self.raw(z, w) + self.raw(-z, w))
    }
}

/// Angular part `b2` of the binary kernel.
#[derive(Clone, Debug, PartialEq)]
pub enum BinaryAngular<T> {
    Zero,
    /// `b2(z) = |z| / 2`.
    HardSphere,
    Constant(T),
    Table(AngularTable<T>),
}

impl<T: Real> BinaryAngular<T> {
    /// Constant density with unit angular norm.
    pub fn maxwell(d: usize) -> Self {
        BinaryAngular::Constant(T::lit(1.0 / sphere_area(d)))
    }
}

/// Angular part `b3` of the ternary kernel.
#[derive(Clone, Debug, PartialEq)]
pub enum TernaryAngular<T> {
    Zero,
    /// `b3(z, w) = |z| / (2 sqrt(1 + w))`.
    Derived,
    Constant(T),
    Table(AngularTable2<T>),
}

impl<T: Real> TernaryAngular<T> {
    /// Constant density with unit angular norm.
    pub fn maxwell(d: usize) -> Self {
        TernaryAngular::Constant(T::lit(1.0 / sphere_area(2 * d)))
    }
}

/// Kernel exponents and angular densities of both collision families.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelConfig<T> {
    dim: usize,
    gamma2: T,
    gamma3: T,
    b2: BinaryAngular<T>,
    b3: TernaryAngular<T>,
}

impl<T: Real> KernelConfig<T> {
    /// Requires `gamma2 in (1 - d, 1]`, `gamma3 in (1 - 2d, 1]` and at least one nonzero family.
    pub fn new(dim: usize, gamma2: T, b2: BinaryAngular<T>, gamma3: T, b3: TernaryAngular<T>) -> Result<Self> {
        let d = T::from_usize_lossy(dim);
        if !(gamma2 > T::one() - d && gamma2 <= T::one()) {
            return Err(Error::InvalidParameter(format!("gamma2 = {gamma2} outside (1 - d, 1]")));
        }
        if !(gamma3 > T::one() - d - d && gamma3 <= T::one()) {
            return Err(Error::InvalidParameter(format!("gamma3 = {gamma3} outside (1 - 2d, 1]")));
        }
        if let BinaryAngular::Constant(c) = b2 {
            check_values(&[c])?;
        }
        if let TernaryAngular::Constant(c) = b3 {
            check_values(&[c])?;
        }
        let cfg = Self { dim, gamma2, gamma3, b2, b3 };
        if !cfg.has_binary() && !cfg.has_ternary() {
            return Err(Error::InvalidParameter("both angular densities vanish".into()));
        }
        Ok(cfg)
    }

    /// Hard-sphere binary kernel plus the derived ternary kernel.
    pub fn hard_sphere_with_ternary(dim: usize) -> Result<Self> {
        Self::new(dim, T::one(), BinaryAngular::HardSphere, T::one(), TernaryAngular::Derived)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn gamma2(&self) -> T {
        self.gamma2
    }
    pub fn gamma3(&self) -> T {
        self.gamma3
    }
    pub fn b2(&self) -> &BinaryAngular<T> {
        &self.b2
    }
    pub fn b3(&self) -> &TernaryAngular<T> {
        &self.b3
    }

    pub fn has_binary(&self) -> bool {
        match &self.b2 {
            BinaryAngular::Zero => false,
            BinaryAngular::Constant(c) => *c > T::zero(),
            _ => true,
        }
    }

    pub fn has_ternary(&self) -> bool {
        match &self.b3 {
            TernaryAngular::Zero => false,
            TernaryAngular::Constant(c) => *c > T::zero(),
            _ => true,
        }
    }

    /// Same kernel with the binary family removed.
    pub fn without_binary(&self) -> Result<Self> {
        Self::new(self.dim, self.gamma2, BinaryAngular::Zero, self.gamma3, self.b3.clone())
    }

    /// Same kernel with the ternary family removed.
    pub fn without_ternary(&self) -> Result<Self> {
        Self::new(self.dim, self.gamma2, self.b2.clone(), self.gamma3, TernaryAngular::Zero)
    }

    /// `b2(z)` for `z in [-1, 1]`.
    pub fn b2_eval(&self, z: T) -> Result<T> {
        let z = clamp_domain(z, T::one(), "b2 argument")?;
        Ok(match &self.b2 {
            BinaryAngular::Zero => T::zero(),
            BinaryAngular::HardSphere => T::lit(0.5) * z.abs(),
            BinaryAngular::Constant(c) => *c,
            BinaryAngular::Table(t) => t.eval(z),
        })
    }

    /// `b3(z, w)` for `z in [-1, 1]`, `w in [-1/2, 1/2]`.
    pub fn b3_eval(&self, z: T, w: T) -> Result<T> {
        let z = clamp_domain(z, T::one(), "b3 first argument")?;
        let w = clamp_domain(w, T::lit(0.5), "b3 second argument")?;
        Ok(match &self.b3 {
            TernaryAngular::Zero => T::zero(),
            TernaryAngular::Derived => z.abs() / (T::lit(2.0) * (T::one() + w).sqrt()),
            TernaryAngular::Constant(c) => *c,
            TernaryAngular::Table(t) => t.eval(z, w),
        })
    }

    /// `B2(u, omega) = |u|^gamma2 b2(u^ . omega)`; `None` marks a degenerate
    /// frame (`u = 0` with `gamma2 <= 0`) that must be skipped.
    #[inline]
    pub fn big_b2<const D: usize>(&self, u: &[T; D], omega: &[T; D]) -> Result<Option<T>> {
        let m = vecn::norm(u);
        if m == T::zero() {
            return Ok(if self.gamma2 > T::zero() { Some(T::zero()) } else { None });
        }
        let z = vecn::dot(u, omega) / m;
        Ok(Some(m.powf(self.gamma2) * self.b2_eval(z)?))
    }

    /// `B3 = |u~|^gamma3 b3(u_bar . omega, omega1 . omega2)`; `None` marks a degenerate frame.
    #[inline]
    pub fn big_b3<const D: usize>(
        &self,
        v: &[T; D],
        v1: &[T; D],
        v2: &[T; D],
        omega1: &[T; D],
        omega2: &[T; D],
    ) -> Result<Option<T>> {
        let a = vecn::sub(v1, v);
        let b = vecn::sub(v2, v);
        let m = (vecn::norm_sq(&a) + vecn::norm_sq(&b) + vecn::norm_sq(&vecn::sub(&a, &b))).sqrt();
        if m == T::zero() {
            return Ok(if self.gamma3 > T::zero() { Some(T::zero()) } else { None });
        }
        let z = (vecn::dot(omega1, &a) + vecn::dot(omega2, &b)) / m;
        Ok(Some(m.powf(self.gamma3) * self.b3_eval(z, vecn::dot(omega1, omega2))?))
    }

    /// `||b2|| = int_{S^{d-1}} b2(u^ . omega) d omega` (independent of `u^`).
    pub fn binary_angular_norm(&self) -> Result<T> {
        match &self.b2 {
            BinaryAngular::Zero => return Ok(T::zero()),
            BinaryAngular::Constant(c) => return Ok(*c * T::lit(sphere_area(self.dim))),
            _ => {}
        }
        let pi = std::f64::consts::PI;
        let mut acc = 0.0;
        if self.dim == 2 {
            for (th, w) in composite_gl(256, 8, 0.0, pi) {
                acc += 2.0 * w * self.b2_eval(T::lit(th.cos()))?.as_f64();
            }
        } else {
            let jac = sphere_area(self.dim - 1);
            let pow = (self.dim as f64 - 3.0) / 2.0;
            for (z, w) in composite_gl(256, 8, -1.0, 1.0) {
                acc += jac * w * self.b2_eval(T::lit(z))?.as_f64() * (1.0 - z * z).powf(pow);
            }
        }
        if !acc.is_finite() {
            return Err(Error::NotIntegrable("binary angular density".into()));
        }
        Ok(T::lit(acc))
    }

    /// `||b3|| = sup_{nu in E} int_{S^{2d-1}} b3(nu . omega, omega1 . omega2) d omega`,
    /// where `E` is the ellipsoid `|nu1|^2 + |nu2|^2 + |nu1 - nu2|^2 = 1`.
    ///
    /// The supremum is searched over `n_search` low-discrepancy points of `E`
    /// followed by a local refinement of the best candidates.
    pub fn ternary_angular_norm(&self, n_search: usize) -> Result<T> {
        match &self.b3 {
            TernaryAngular::Zero => return Ok(T::zero()),
            TernaryAngular::Constant(c) => return Ok(*c * T::lit(sphere_area(2 * self.dim))),
            _ => {}
        }
        match self.dim {
            2 => self.ternary_norm_search::<2>(n_search),
            3 => self.ternary_norm_search::<3>(n_search),
            d => Err(Error::Unsupported(format!("dimension {d}"))),
        }
    }

    fn ternary_norm_search<const D: usize>(&self, n_search: usize) -> Result<T> {
        let rule = if D == 2 { sphere_pair_rule::<f64, D>(24, 64) } else { sphere_pair_rule::<f64, D>(12, 16) };
        let dirs: Vec<(Vec<f64>, f64, f64)> = rule
            .iter()
            .map(|(a, b, w)| {
                let mut o = a.to_vec();
                o.extend_from_slice(b);
                (o, vecn::dot(a, b), *w)
            })
            .collect();
        let integral = |nu: &[f64]| -> Result<f64> {
            let mut acc = 0.0;
            for (o, w12, w) in &dirs {
                let z: f64 = o.iter().zip(nu).map(|(a, b)| a * b).sum();
                acc += w * self.b3_eval(T::lit(z), T::lit(*w12))?.as_f64();
            }
            Ok(acc)
        };
        let mut scored = Vec::with_capacity(n_search);
        for p in low_discrepancy_sphere(n_search.max(1), 2 * D) {
            let nu = sphere_to_ellipsoid::<D>(&p);
            scored.push((integral(&nu)?, p));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut best = scored[0].0;
        for (mut val, mut p) in scored.into_iter().take(4) {
            let mut step = 0.1;
            while step > 1e-4 {
                let mut improved = false;
                for k in 0..2 * D {
                    for sgn in [1.0, -1.0] {
                        let mut q = p.clone();
                        q[k] += sgn * step;
                        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
                        q.iter_mut().for_each(|c| *c /= n);
                        let cand = integral(&sphere_to_ellipsoid::<D>(&q))?;
                        if cand > val {
                            val = cand;
                            p = q;
                            improved = true;
                        }
                    }
                }
                if !improved {
                    step *= 0.5;
                }
            }
            best = best.max(val);
        }
        if !best.is_finite() {
            return Err(Error::NotIntegrable("ternary angular density".into()));
        }
        Ok(T::lit(best))
    }

    /// Both angular norms.
    pub fn angular_norms(&self) -> Result<AngularNorms<T>> {
        Ok(AngularNorms { b2: self.binary_angular_norm()?, b3: self.ternary_angular_norm(1024)? })
    }
}

/// Angular norms `(||b2||, ||b3||)`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct AngularNorms<T> {
    pub b2: T,
    pub b3: T,
}

/// Maps a unit vector `(p, m) in S^{2D-1}` to `(nu1, nu2) in E`.
pub fn sphere_to_ellipsoid<const D: usize>(p: &[f64]) -> Vec<f64> {
    let s3 = 3f64.sqrt();
    let h = 0.5f64.sqrt();
    let mut nu = vec![0.0; 2 * D];
    for k in 0..D {
        let a = p[k];
        let b = p[D + k] / s3;
        nu[k] = h * (a + b);
        nu[D + k] = h * (a - b);
    }
    nu
}

fn clamp_domain<T: Real>(x: T, bound: T, what: &str) -> Result<T> {
    let tol = T::lit(1e-9);
    if !(x.abs() <= bound + tol) {
        return Err(Error::AngularDomain(format!("{what} = {x} outside [-{bound}, {bound}]")));
    }
    Ok(x.max(-bound).min(bound))
}
