//! Transported gain, loss and collision-frequency operators on a phase grid.
//!
//! All operators are evaluated with a frame rule: a fixed list of weighted
//! `(v1, omega)` binary samples and `(v1, v2, omega1, omega2)` ternary samples
//! shared by every node. Weights are positive and interpolation is monotone,
//! so every operator is monotone in each argument.
//!
//! On the grid, for a fixed time slice, velocity node and frame, every spatial
//! node sees the same fractional shift `t (v - v')`. A post-collisional lookup
//! is therefore a fixed `2^D`-point stencil applied to a velocity-collapsed
//! slice, which is how [`CollisionOperators`] sweeps the grid.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::collision_maps::{sample_sphere, sample_sphere_pair, ternary_coefficient};
use crate::cross_sections::KernelConfig;
use crate::error::{Error, Result};
use crate::phase_space::{Maxwellian, PhaseDensity, PhaseField, PhaseGrid};
use crate::quadrature::{gauss_legendre_on, sphere_area, sphere_pair_rule, sphere_rule};
use crate::scalar::{vecn, Real};

/// Velocity/angle integration backend.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum Backend {
    /// Tensor Gauss-Legendre velocities with trapezoidal angles (`d = 2` only).
    Deterministic,
    /// Frozen pool of Gaussian-importance velocity samples and uniform directions.
    MonteCarlo,
}

/// Quadrature settings for the operators.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct QuadratureSpec {
    pub backend: Backend,
    /// Angles per circle (deterministic); even, at least 8.
    pub n_ang: usize,
    /// Gauss-Legendre velocity nodes per axis (deterministic).
    pub n_v: usize,
    /// Samples per collision family (Monte Carlo).
    pub n_mc: usize,
    pub seed: u64,
    /// Report a statistical or refinement error estimate with each result.
    pub error_estimate: bool,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self { backend: Backend::MonteCarlo, n_ang: 8, n_v: 4, n_mc: 10_000, seed: 0, error_estimate: false }
    }
}

impl QuadratureSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self.backend {
            Backend::Deterministic => {
                if dim != 2 {
                    return Err(Error::Unsupported("deterministic backend is implemented for d = 2".into()));
                }
                if self.n_ang < 8 || self.n_ang % 2 != 0 {
                    return Err(Error::InvalidParameter(format!("n_ang = {} must be even and >= 8", self.n_ang)));
                }
                if self.n_v < 2 {
                    return Err(Error::InvalidParameter("n_v must be at least 2".into()));
                }
            }
            Backend::MonteCarlo => {
                if self.n_mc < 2 {
                    return Err(Error::InvalidParameter("n_mc must be at least 2".into()));
                }
            }
        }
        Ok(())
    }

    /// Coarser rule used for the refinement-difference estimate.
    fn coarsened(&self) -> Self {
        let mut c = self.clone();
        c.n_ang = (self.n_ang / 2).max(4) & !1;
        c.n_v = (self.n_v - 1).max(2);
        c.n_mc = (self.n_mc / 2).max(2);
        c.seed = self.seed.wrapping_add(1);
        c.error_estimate = false;
        c
    }
}

/// Weighted binary sample; `weight` carries the velocity and angular measure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinarySample<T, const D: usize> {
    pub v1: [T; D],
    pub omega: [T; D],
    pub weight: T,
}

/// Weighted ternary sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TernarySample<T, const D: usize> {
    pub v1: [T; D],
    pub v2: [T; D],
    pub omega1: [T; D],
    pub omega2: [T; D],
    pub weight: T,
}

/// Frame rule shared by all nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRule<T, const D: usize> {
    pub binary: Vec<BinarySample<T, D>>,
    pub ternary: Vec<TernarySample<T, D>>,
}

impl<T: Real, const D: usize> FrameRule<T, D>
where
    StandardNormal: Distribution<T>,
{
    pub fn build(spec: &QuadratureSpec, grid: &PhaseGrid<T, D>, env: &Maxwellian<T>, kernel: &KernelConfig<T>) -> Result<Self> {
        spec.validate(D)?;
        if kernel.dim() != D {
            return Err(Error::DimensionMismatch(format!("kernel dimension {} vs grid {}", kernel.dim(), D)));
        }
        let mut rule = FrameRule { binary: Vec::new(), ternary: Vec::new() };
        match spec.backend {
            Backend::Deterministic => {
                let rv = grid.rv().as_f64();
                let nodes1 = gauss_legendre_on(spec.n_v, -rv, rv);
                let mut vel: Vec<([T; D], T)> = Vec::new();
                for flat in 0..nodes1.len().pow(D as u32) {
                    let idx = PhaseGrid::<T, D>::unravel(flat, nodes1.len());
                    let mut p = [T::zero(); D];
                    let mut w = 1.0;
                    for a in 0..D {
                        p[a] = T::lit(nodes1[idx[a]].0);
                        w *= nodes1[idx[a]].1;
                    }
                    vel.push((p, T::lit(w)));
                }
                if kernel.has_binary() {
                    let circle = sphere_rule::<T, D>(spec.n_ang);
                    for (v1, wv) in &vel {
                        for (om, wo) in &circle {
                            rule.binary.push(BinarySample { v1: *v1, omega: *om, weight: *wv * *wo });
                        }
                    }
                }
                if kernel.has_ternary() {
                    let pairs = sphere_pair_rule::<T, D>((spec.n_ang / 4).max(2), spec.n_ang);
                    for (v1, w1) in &vel {
                        for (v2, w2) in &vel {
                            for (o1, o2, wo) in &pairs {
                                rule.ternary.push(TernarySample {
                                    v1: *v1,
                                    v2: *v2,
                                    omega1: *o1,
                                    omega2: *o2,
                                    weight: *w1 * *w2 * *wo,
                                });
                            }
                        }
                    }
                }
            }
            Backend::MonteCarlo => {
                let beta = env.beta();
                let sd = (T::lit(0.5) / beta).sqrt();
                // (pi / beta)^{d/2} exp(beta |v|^2) is the inverse proposal density
                let gauss_mass = (T::PI() / beta).powi(D as i32).sqrt();
                let n = T::from_usize_lossy(spec.n_mc);
                let draw = |rng: &mut ChaCha8Rng| -> [T; D] {
                    let mut v = [T::zero(); D];
                    for c in v.iter_mut() {
                        let z: T = StandardNormal.sample(rng);
                        *c = z * sd;
                    }
                    v
                };
                if kernel.has_binary() {
                    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                    rng.set_stream(1);
                    let area = T::lit(sphere_area(D));
                    for _ in 0..spec.n_mc {
                        let v1 = draw(&mut rng);
                        let omega = sample_sphere(&mut rng);
                        let weight = area * gauss_mass * (beta * vecn::norm_sq(&v1)).exp() / n;
                        rule.binary.push(BinarySample { v1, omega, weight });
                    }
                }
                if kernel.has_ternary() {
                    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                    rng.set_stream(2);
                    let area = T::lit(sphere_area(2 * D));
                    for _ in 0..spec.n_mc {
                        let v1 = draw(&mut rng);
                        let v2 = draw(&mut rng);
                        let (omega1, omega2) = sample_sphere_pair(&mut rng);
                        let weight = area
                            * gauss_mass
                            * gauss_mass
                            * (beta * (vecn::norm_sq(&v1) + vecn::norm_sq(&v2))).exp()
                            / n;
                        rule.ternary.push(TernarySample { v1, v2, omega1, omega2, weight });
                    }
                }
            }
        }
        Ok(rule)
    }
}

/// Output of an operator evaluation on the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorResult<T, const D: usize> {
    /// Raw nodal values of the transported operator.
    pub field: PhaseField<T, D>,
    /// Relative error estimate: statistical (Monte Carlo) or refinement difference (deterministic).
    pub error_estimate: Option<T>,
    /// Set when the error estimate exceeds the interpolation tolerance.
    pub flagged: bool,
}

/// Operator family evaluated by a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    /// `R2^#(g)`
    BinaryRate,
    /// `R3^#(g, h)`
    TernaryRate,
    /// `G2^#(f, g) / M`
    BinaryGain,
    /// `G3^#(f, g, h) / M`
    TernaryGain,
}

impl Family {
    fn arity(self) -> usize {
        match self {
            Family::BinaryRate => 1,
            Family::TernaryRate | Family::BinaryGain => 2,
            Family::TernaryGain => 3,
        }
    }
    fn is_gain(self) -> bool {
        matches!(self, Family::BinaryGain | Family::TernaryGain)
    }
    fn is_binary(self) -> bool {
        matches!(self, Family::BinaryRate | Family::BinaryGain)
    }
}

/// Values of every operator at one phase-space point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PointValues<T> {
    /// `f^#(t, x, v)`
    pub f: T,
    pub r2: T,
    pub r3: T,
    pub g2: T,
    pub g3: T,
}

impl<T: Real> PointValues<T> {
    pub fn l2(&self) -> T {
        self.f * self.r2
    }
    pub fn l3(&self) -> T {
        self.f * self.r3
    }
    pub fn loss(&self) -> T {
        self.l2() + self.l3()
    }
    pub fn gain(&self) -> T {
        self.g2 + self.g3
    }
}

/// A particle lookup of one frame: input index and query velocity.
type Lookup<T, const D: usize> = (usize, [T; D]);

/// Transported collision operators for a fixed grid, envelope, kernel and rule.
#[derive(Clone)]
pub struct CollisionOperators<T, const D: usize> {
    grid: PhaseGrid<T, D>,
    envelope: Maxwellian<T>,
    kernel: KernelConfig<T>,
    spec: QuadratureSpec,
    rule: FrameRule<T, D>,
    coarse: Option<FrameRule<T, D>>,
    tol: T,
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl<T: Real, const D: usize> CollisionOperators<T, D>
where
    StandardNormal: Distribution<T>,
{
    pub fn new(grid: &PhaseGrid<T, D>, envelope: Maxwellian<T>, kernel: KernelConfig<T>, spec: QuadratureSpec) -> Result<Self> {
        let rule = FrameRule::build(&spec, grid, &envelope, &kernel)?;
        let coarse = if spec.error_estimate && spec.backend == Backend::Deterministic {
            Some(FrameRule::build(&spec.coarsened(), grid, &envelope, &kernel)?)
        } else {
            None
        };
        Ok(Self { grid: grid.clone(), envelope, kernel, spec, rule, coarse, tol: T::lit(1e-6), pool: None })
    }

    /// Runs sweeps on a dedicated pool with `workers` threads; results do not depend on `workers`.
    pub fn with_workers(mut self, workers: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
        self.pool = Some(Arc::new(pool));
        Ok(self)
    }

    /// Tolerance above which a result is flagged.
    pub fn with_tolerance(mut self, tol: T) -> Self {
        self.tol = tol;
        self
    }

    pub fn grid(&self) -> &PhaseGrid<T, D> {
        &self.grid
    }
    pub fn envelope(&self) -> &Maxwellian<T> {
        &self.envelope
    }
    pub fn kernel(&self) -> &KernelConfig<T> {
        &self.kernel
    }
    pub fn rule(&self) -> &FrameRule<T, D> {
        &self.rule
    }
    pub fn spec(&self) -> &QuadratureSpec {
        &self.spec
    }

    fn check_inputs(&self, inputs: &[&PhaseDensity<T, D>]) -> Result<()> {
        for d in inputs {
            if d.grid() != &self.grid || d.envelope() != &self.envelope {
                return Err(Error::GridMismatch);
            }
        }
        Ok(())
    }

    /// Lookups of a frame at velocity `v`, with its kernel-weighted measure.
    #[inline]
    fn frame(&self, family: Family, rule: &FrameRule<T, D>, s: usize, v: &[T; D]) -> Result<Option<(T, [Lookup<T, D>; 3])>> {
        let z = [T::zero(); D];
        if family.is_binary() {
            let b = &rule.binary[s];
            let u = vecn::sub(&b.v1, v);
            let Some(bk) = self.kernel.big_b2(&u, &b.omega)? else { return Ok(None) };
            let w = b.weight * bk;
            if family == Family::BinaryRate {
                return Ok(Some((w, [(1, b.v1), (0, z), (0, z)])));
            }
            let c = vecn::dot(&b.omega, &u);
            let vp = vecn::axpy(v, c, &b.omega);
            let v1p = vecn::axpy(&b.v1, -c, &b.omega);
            Ok(Some((w, [(0, vp), (1, v1p), (0, z)])))
        } else {
            let f = &rule.ternary[s];
            let Some(bk) = self.kernel.big_b3(v, &f.v1, &f.v2, &f.omega1, &f.omega2)? else { return Ok(None) };
            let w = f.weight * bk;
            if family == Family::TernaryRate {
                return Ok(Some((w, [(1, f.v1), (2, f.v2), (0, z)])));
            }
            let c = ternary_coefficient(v, &f.v1, &f.v2, &f.omega1, &f.omega2);
            let vs = vecn::axpy(v, c, &vecn::add(&f.omega1, &f.omega2));
            let v1s = vecn::axpy(&f.v1, -c, &f.omega1);
            let v2s = vecn::axpy(&f.v2, -c, &f.omega2);
            Ok(Some((w, [(0, vs), (1, v1s), (2, v2s)])))
        }
    }

    fn n_samples(&self, family: Family, rule: &FrameRule<T, D>) -> usize {
        if family.is_binary() {
            rule.binary.len()
        } else {
            rule.ternary.len()
        }
    }

    fn run<R: Send>(&self, job: impl FnOnce() -> R + Send) -> R {
        match &self.pool {
            Some(p) => p.install(job),
            None => job(),
        }
    }

    /// Sweeps one family over every node. Inputs are `(f, g, h)`; unused ones are ignored.
    /// Returns rate values for rate families and `G / M` for gain families, plus
    /// per-node sums of squared frame contributions when `stats` is set.
    pub fn sweep(
        &self,
        family: Family,
        inputs: [&PhaseDensity<T, D>; 3],
        stats: bool,
    ) -> Result<(Vec<T>, Option<Vec<T>>)> {
        self.sweep_with(family, inputs, stats, &self.rule)
    }

    fn sweep_with(
        &self,
        family: Family,
        inputs: [&PhaseDensity<T, D>; 3],
        stats: bool,
        rule: &FrameRule<T, D>,
    ) -> Result<(Vec<T>, Option<Vec<T>>)> {
        self.check_inputs(&inputs)?;
        let g = &self.grid;
        let active: Vec<usize> = match family {
            Family::BinaryRate => vec![1],
            Family::TernaryRate => vec![1, 2],
            Family::BinaryGain => vec![0, 1],
            Family::TernaryGain => vec![0, 1, 2],
        };
        let empty = self.n_samples(family, rule) == 0 || active.iter().any(|&i| inputs[i].is_zero());
        if empty {
            return Ok((vec![T::zero(); g.len()], stats.then(|| vec![T::zero(); g.len()])));
        }
        let slices: Vec<Result<(Vec<T>, Vec<T>)>> = self.run(|| {
            (0..g.nt())
                .into_par_iter()
                .map(|k| self.sweep_slice(family, &inputs, k, stats, rule))
                .collect()
        });
        let mut out = Vec::with_capacity(g.len());
        let mut sq = Vec::with_capacity(if stats { g.len() } else { 0 });
        for s in slices {
            let (a, b) = s?;
            out.extend_from_slice(&a);
            sq.extend_from_slice(&b);
        }
        Ok((out, stats.then_some(sq)))
    }

    fn sweep_slice(
        &self,
        family: Family,
        inputs: &[&PhaseDensity<T, D>; 3],
        k: usize,
        stats: bool,
        rule: &FrameRule<T, D>,
    ) -> Result<(Vec<T>, Vec<T>)> {
        let g = &self.grid;
        let nx = g.nx();
        let nxn = g.x_nodes();
        let nvn = g.v_nodes();
        let t = g.time(k);
        let hx = g.hx();
        let alpha = self.envelope.alpha();
        let beta = self.envelope.beta();
        let arity = family.arity();

        // velocity-major copies of the input slices: vm[input][jv * nxn + ix]
        let mut vm: [Vec<T>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for (i, d) in inputs.iter().enumerate() {
            let needed = match family {
                Family::BinaryRate => i == 1,
                Family::TernaryRate => i == 1 || i == 2,
                Family::BinaryGain => i < 2,
                Family::TernaryGain => true,
            };
            if !needed {
                continue;
            }
            let s = d.slice_ratios(k);
            let mut buf = vec![T::zero(); nxn * nvn];
            for ix in 0..nxn {
                for jv in 0..nvn {
                    buf[jv * nxn + ix] = s[ix * nvn + jv];
                }
            }
            vm[i] = buf;
        }

        let mut out = vec![T::zero(); nxn * nvn];
        let mut sq = if stats { vec![T::zero(); nxn * nvn] } else { Vec::new() };
        let mut col: Vec<Vec<T>> = (0..arity).map(|_| vec![T::zero(); nxn]).collect();
        let mut vals: Vec<Vec<T>> = (0..arity).map(|_| vec![T::zero(); nxn]).collect();
        let x_coords: Vec<T> = (0..nx).map(|i| g.x_coord(i)).collect();
        let n_s = self.n_samples(family, rule);
        let corners = 1usize << D;
        // exp(-alpha (x_i + d_a)^2) per lookup and axis: env[(p * D + a) * nx + i]
        let mut env = vec![T::zero(); 3 * D * nx];

        for jv in 0..nvn {
            let v = g.v_point(jv);
            for s in 0..n_s {
                let Some((w, parts)) = self.frame(family, rule, s, &v)? else { continue };
                if w == T::zero() {
                    continue;
                }
                // per-lookup geometry
                let mut lo = [0usize; D];
                let mut hi = [nx - 1; D];
                let mut shift = [[0isize; D]; 3];
                let mut theta = [[T::zero(); D]; 3];
                let mut vcorner: [[(usize, T); 8]; 3] = [[(0, T::zero()); 8]; 3];
                let mut vscale = [T::zero(); 3];
                let mut outside = false;
                for (p, (_, wv)) in parts.iter().take(arity).enumerate() {
                    // velocity cell
                    let mut cells = [(0usize, T::zero()); D];
                    for a in 0..D {
                        match g.locate_v(wv[a]) {
                            Some(c) => cells[a] = (c.lower, c.theta),
                            None => {
                                outside = true;
                                break;
                            }
                        }
                    }
                    if outside {
                        break;
                    }
                    for c in 0..corners {
                        let mut idx = [0usize; D];
                        let mut wt = T::one();
                        for a in 0..D {
                            let up = (c >> a) & 1 == 1;
                            idx[a] = cells[a].0 + up as usize;
                            wt = wt * if up { cells[a].1 } else { T::one() - cells[a].1 };
                        }
                        vcorner[p][c] = (PhaseGrid::<T, D>::ravel(&idx, g.nv()), wt);
                    }
                    vscale[p] = (-beta * vecn::norm_sq(wv)).exp();
                    // spatial shift t (v - w) in cell units
                    for a in 0..D {
                        let d = t * (v[a] - wv[a]);
                        let o = d / hx;
                        let n = o.floor();
                        let th = o - n;
                        let n = n.to_isize().unwrap_or(isize::MAX / 4);
                        shift[p][a] = n;
                        theta[p][a] = th;
                        let extra = if th > T::zero() { 1 } else { 0 };
                        let l = (-n).max(0);
                        let h = (nx as isize - 1 - n - extra).min(nx as isize - 1);
                        if h < l {
                            outside = true;
                            break;
                        }
                        lo[a] = lo[a].max(l as usize);
                        hi[a] = hi[a].min(h as usize);
                        if hi[a] < lo[a] {
                            outside = true;
                            break;
                        }
                        let tab = &mut env[(p * D + a) * nx..(p * D + a + 1) * nx];
                        for i in l as usize..=h as usize {
                            let xq = x_coords[i] + d;
                            tab[i] = (-alpha * xq * xq).exp();
                        }
                    }
                    if outside {
                        break;
                    }
                }
                if outside {
                    continue;
                }

                // collapse velocity corners, then apply the spatial stencil
                for (p, (inp, _)) in parts.iter().take(arity).enumerate() {
                    let src = &vm[*inp];
                    let cp = &mut col[p];
                    let mut wlo = [0usize; D];
                    let mut whi = [0usize; D];
                    for a in 0..D {
                        wlo[a] = (lo[a] as isize + shift[p][a]) as usize;
                        whi[a] = ((hi[a] as isize + shift[p][a] + 1) as usize).min(nx - 1);
                    }
                    for_each_row::<D>(&wlo, &whi, nx, |start, len, _| {
                        let dst = &mut cp[start..start + len];
                        dst.fill(T::zero());
                        for &(jc, wt) in vcorner[p].iter().take(corners) {
                            if wt != T::zero() {
                                axpy(dst, wt, &src[jc * nxn + start..jc * nxn + start + len]);
                            }
                        }
                    });
                    let vp = &mut vals[p];
                    let th = theta[p];
                    let sh = shift[p];
                    let ea = &env[p * D * nx..(p + 1) * D * nx];
                    let vsc = vscale[p];
                    // the shift is uniform in x, so stencil weights and offsets are too
                    let mut stencil = [(0isize, T::zero()); 8];
                    let mut n_st = 0;
                    'corner: for c in 0..corners {
                        let mut wt = T::one();
                        let mut off = 0isize;
                        for a in 0..D {
                            let up = (c >> a) & 1 == 1;
                            let f = if up { th[a] } else { T::one() - th[a] };
                            if f == T::zero() {
                                continue 'corner;
                            }
                            wt = wt * f;
                            off = off * nx as isize + sh[a] + up as isize;
                        }
                        stencil[n_st] = (off, wt);
                        n_st += 1;
                    }
                    let cp = &col[p];
                    for_each_row::<D>(&lo, &hi, nx, |start, len, idx| {
                        let dst = &mut vp[start..start + len];
                        dst.fill(T::zero());
                        for &(off, wt) in &stencil[..n_st] {
                            let from = (start as isize + off) as usize;
                            axpy(dst, wt, &cp[from..from + len]);
                        }
                        let mut e = vsc;
                        for a in 0..D - 1 {
                            e = e * ea[a * nx + idx[a]];
                        }
                        let last = &ea[(D - 1) * nx + idx[D - 1]..(D - 1) * nx + idx[D - 1] + len];
                        for (d, x) in dst.iter_mut().zip(last) {
                            *d = *d * (e * *x);
                        }
                    });
                }
                for_each_in_box::<D>(&lo, &hi, nx, |m| {
                    let mut c = w;
                    for vp in vals.iter().take(arity) {
                        c = c * vp[m];
                    }
                    out[m * nvn + jv] = out[m * nvn + jv] + c;
                    if stats {
                        sq[m * nvn + jv] = sq[m * nvn + jv] + c * c;
                    }
                });
            }
        }
        if family.is_gain() {
            let (mx, mv) = g.envelope_tables(&self.envelope);
            for ix in 0..nxn {
                for jv in 0..nvn {
                    let m = mx[ix] * mv[jv];
                    out[ix * nvn + jv] = out[ix * nvn + jv] / m;
                    if stats {
                        sq[ix * nvn + jv] = sq[ix * nvn + jv] / (m * m);
                    }
                }
            }
        }
        Ok((out, sq))
    }

    /// `R2^#(g) + R3^#(g, h)` at every node.
    pub fn total_rate(&self, g: &PhaseDensity<T, D>, h: &PhaseDensity<T, D>) -> Result<Vec<T>> {
        let mut r = self.sweep(Family::BinaryRate, [g, g, h], false)?.0;
        if self.kernel.has_ternary() {
            let r3 = self.sweep(Family::TernaryRate, [g, g, h], false)?.0;
            r.iter_mut().zip(r3).for_each(|(a, b)| *a = *a + b);
        }
        Ok(r)
    }

    /// `G^#(f, g, h) / M` at every node.
    pub fn total_gain_ratio(&self, f: &PhaseDensity<T, D>, g: &PhaseDensity<T, D>, h: &PhaseDensity<T, D>) -> Result<Vec<T>> {
        let mut r = self.sweep(Family::BinaryGain, [f, g, h], false)?.0;
        if self.kernel.has_ternary() {
            let r3 = self.sweep(Family::TernaryGain, [f, g, h], false)?.0;
            r.iter_mut().zip(r3).for_each(|(a, b)| *a = *a + b);
        }
        Ok(r)
    }

    fn result(&self, family: Family, inputs: [&PhaseDensity<T, D>; 3]) -> Result<OperatorResult<T, D>> {
        let mc = self.spec.backend == Backend::MonteCarlo && self.spec.error_estimate;
        let (mut vals, sq) = self.sweep(family, inputs, mc)?;
        let mut err = None;
        if let Some(sq) = sq {
            let n = T::from_usize_lossy(self.n_samples(family, &self.rule).max(2));
            let mut worst = T::zero();
            let mut scale = T::zero();
            for (m, s2) in vals.iter().zip(sq.iter()) {
                // Var(mean) = (n * sum c^2 - mean^2) / (n - 1), contributions already divided by n
                let var = ((n * *s2 - *m * *m) / (n - T::one())).max(T::zero());
                worst = worst.max(var.sqrt());
                scale = scale.max(m.abs());
            }
            err = Some(if scale > T::zero() { worst / scale } else { T::zero() });
        }
        if let Some(coarse) = &self.coarse {
            let (cv, _) = self.sweep_with(family, inputs, false, coarse)?;
            let mut diff = T::zero();
            let mut scale = T::zero();
            for (a, b) in vals.iter().zip(cv.iter()) {
                diff = diff.max((*a - *b).abs());
                scale = scale.max(a.abs());
            }
            err = Some(if scale > T::zero() { diff / scale } else { T::zero() });
        }
        if family.is_gain() {
            let (mx, mv) = self.grid.envelope_tables(&self.envelope);
            let nvn = self.grid.v_nodes();
            let sl = self.grid.slice_len();
            for (i, x) in vals.iter_mut().enumerate() {
                let s = i % sl;
                *x = *x * mx[s / nvn] * mv[s % nvn];
            }
        }
        let flagged = err.is_some_and(|e| e > self.tol);
        Ok(OperatorResult { field: PhaseField::from_values(&self.grid, vals)?, error_estimate: err, flagged })
    }

    fn loss_from_rate(&self, f: &PhaseDensity<T, D>, mut rate: OperatorResult<T, D>) -> OperatorResult<T, D> {
        let raw = f.to_field();
        for (r, fv) in rate.field.values_mut().iter_mut().zip(raw.values()) {
            *r = *r * *fv;
        }
        rate
    }

    /// `R2^#(g)(t, x, v) = int B2 g^#(t, x + t(v - v1), v1)`.
    pub fn r2_sharp(&self, g: &PhaseDensity<T, D>) -> Result<OperatorResult<T, D>> {
        self.result(Family::BinaryRate, [g, g, g])
    }

    /// `R3^#(g, h)`.
    pub fn r3_sharp(&self, g: &PhaseDensity<T, D>, h: &PhaseDensity<T, D>) -> Result<OperatorResult<T, D>> {
        self.result(Family::TernaryRate, [g, g, h])
    }

    /// `R^#(g, h) = R2^#(g) + R3^#(g, h)`.
    pub fn r_sharp(&self, g: &PhaseDensity<T, D>, h: &PhaseDensity<T, D>) -> Result<OperatorResult<T, D>> {
        let mut a = self.r2_sharp(g)?;
        let b = self.r3_sharp(g, h)?;
        combine(&mut a, &b);
        Ok(a)
    }

    /// `G2^#(f, g)`.
    pub fn g2_sharp(&self, f: &PhaseDensity<T, D>, g: &PhaseDensity<T, D>) -> Result<OperatorResult<T, D>> {
        self.result(Family::BinaryGain, [f, g, g])
    }

    /// `G3^#(f, g, h)`.
    pub fn g3_sharp(&self, f: &PhaseDensity<T, D>, g: &PhaseDensity<T, D>, h: &PhaseDensity<T, D>) -> Result<OperatorResult<T, D>> {
        self.result(Family::TernaryGain, [f, g, h])
    }

    /// `G^# = G2^#(f, g) + G3^#(f, g, h)`.
    pub fn gain_sharp(&self, f: &PhaseDensity<T, D>, g: &PhaseDensity<T, D>, h: &PhaseDensity<T, D>) -> Result<OperatorResult<T, D>> {
        let mut a = self.g2_sharp(f, g)?;
        let b = self.g3_sharp(f, g, h)?;
        combine(&mut a, &b);
        Ok(a)
    }

    /// `L2^#(f, g) = f^# R2^#(g)`.
    pub fn l2_sharp(&self, f: &PhaseDensity<T, D>, g: &PhaseDensity<T, D>) -> Result<OperatorResult<T, D>> {
        Ok(self.loss_from_rate(f, self.r2_sharp(g)?))
    }

    /// `L3^#(f, g, h) = f^# R3^#(g, h)`.
    pub fn l3_sharp(&self, f: &PhaseDensity<T, D>, g: &PhaseDensity<T, D>, h: &PhaseDensity<T, D>) -> Result<OperatorResult<T, D>> {
        Ok(self.loss_from_rate(f, self.r3_sharp(g, h)?))
    }

    /// `L^# = f^# R^#(g, h)`.
    pub fn loss_sharp(&self, f: &PhaseDensity<T, D>, g: &PhaseDensity<T, D>, h: &PhaseDensity<T, D>) -> Result<OperatorResult<T, D>> {
        Ok(self.loss_from_rate(f, self.r_sharp(g, h)?))
    }

    /// All operators at an arbitrary point `(t, x, v)` by direct summation over the rule.
    pub fn eval_point(
        &self,
        t: T,
        x: &[T; D],
        v: &[T; D],
        f: &PhaseDensity<T, D>,
        g: &PhaseDensity<T, D>,
        h: &PhaseDensity<T, D>,
    ) -> Result<PointValues<T>> {
        self.check_inputs(&[f, g, h])?;
        let inputs = [f, g, h];
        let mut pv = PointValues { f: f.interp(t, x, v), ..Default::default() };
        for family in [Family::BinaryRate, Family::BinaryGain, Family::TernaryRate, Family::TernaryGain] {
            let mut acc = T::zero();
            for s in 0..self.n_samples(family, &self.rule) {
                let Some((w, parts)) = self.frame(family, &self.rule, s, v)? else { continue };
                if w == T::zero() {
                    continue;
                }
                let mut c = w;
                for (inp, wv) in parts.iter().take(family.arity()) {
                    let q = vecn::axpy(x, t, &vecn::sub(v, wv));
                    c = c * inputs[*inp].interp(t, &q, wv);
                    if c == T::zero() {
                        break;
                    }
                }
                acc = acc + c;
            }
            match family {
                Family::BinaryRate => pv.r2 = acc,
                Family::BinaryGain => pv.g2 = acc,
                Family::TernaryRate => pv.r3 = acc,
                Family::TernaryGain => pv.g3 = acc,
            }
        }
        Ok(pv)
    }
}

fn combine<T: Real, const D: usize>(a: &mut OperatorResult<T, D>, b: &OperatorResult<T, D>) {
    for (x, y) in a.field.values_mut().iter_mut().zip(b.field.values()) {
        *x = *x + *y;
    }
    a.error_estimate = match (a.error_estimate, b.error_estimate) {
        (Some(p), Some(q)) => Some(p.max(q)),
        (p, q) => p.or(q),
    };
    a.flagged |= b.flagged;
}

/// Visits flat indices of the box `lo..=hi` (per axis) on an `n^D` lattice, last axis fastest.
#[inline]
fn for_each_in_box<const D: usize>(lo: &[usize; D], hi: &[usize; D], n: usize, mut f: impl FnMut(usize)) {
    for_each_in_box_idx::<D>(lo, hi, n, |m, _| f(m));
}

#[inline]
fn axpy<T: Real>(dst: &mut [T], a: T, x: &[T]) {
    for (d, x) in dst.iter_mut().zip(x) {
        *d = *d + a * *x;
    }
}

/// Visits the box row by row along the last axis: `(first flat index, row length, first multi-index)`.
#[inline]
fn for_each_row<const D: usize>(lo: &[usize; D], hi: &[usize; D], n: usize, mut f: impl FnMut(usize, usize, &[usize; D])) {
    let mut idx = *lo;
    loop {
        let base = idx[..D - 1].iter().fold(0, |acc, &i| acc * n + i) * n;
        f(base + lo[D - 1], hi[D - 1] + 1 - lo[D - 1], &idx);
        let mut a = D - 1;
        loop {
            if a == 0 {
                return;
            }
            a -= 1;
            if idx[a] < hi[a] {
                idx[a] += 1;
                for b in a + 1..D - 1 {
                    idx[b] = lo[b];
                }
                break;
            }
        }
    }
}

#[inline]
fn for_each_in_box_idx<const D: usize>(lo: &[usize; D], hi: &[usize; D], n: usize, mut f: impl FnMut(usize, &[usize; D])) {
    let mut idx = *lo;
    loop {
        let base = idx[..D - 1].iter().fold(0, |acc, &i| acc * n + i) * n;
        for last in lo[D - 1]..=hi[D - 1] {
            idx[D - 1] = last;
            f(base + last, &idx);
        }
        // odometer over the leading axes
        let mut a = D - 1;
        loop {
            if a == 0 {
                return;
            }
            a -= 1;
            if idx[a] < hi[a] {
                idx[a] += 1;
                for b in a + 1..D - 1 {
                    idx[b] = lo[b];
                }
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cross_sections::{BinaryAngular, TernaryAngular};
    use approx::assert_relative_eq;

    fn setup(nx: usize, nv: usize, nt: usize) -> (PhaseGrid<f64, 2>, Maxwellian<f64>) {
        let env = Maxwellian::new(1.0, 1.0).unwrap();
        let g = PhaseGrid::fitted(&env, 1e-8, nx, nv, nt, 1.0).unwrap();
        (g, env)
    }

    #[test]
    fn box_iteration_covers_rectangle() {
        let mut seen = Vec::new();
        for_each_in_box::<2>(&[1, 2], &[2, 4], 5, |m| seen.push(m));
        assert_eq!(seen, vec![7, 8, 9, 12, 13, 14]);
        let mut n = 0;
        for_each_in_box::<3>(&[0, 1, 2], &[1, 1, 3], 4, |_| n += 1);
        assert_eq!(n, 4);
    }

    #[test]
    fn sweep_matches_pointwise_evaluation() {
        let (g, env) = setup(6, 5, 3);
        let kernel = KernelConfig::hard_sphere_with_ternary(2).unwrap();
        let spec = QuadratureSpec { n_mc: 64, seed: 3, ..Default::default() };
        let ops = CollisionOperators::new(&g, env, kernel, spec).unwrap();
        let f = PhaseDensity::from_fn(&g, env, 4.0, |t, x, v| (1.0 + 0.1 * x[0] - 0.05 * v[1] * t).abs() * env.eval(x, v)).unwrap();
        let h = PhaseDensity::from_fn(&g, env, 2.0, |_, x, v| (0.5 + 0.02 * x[1] * v[0]).abs() * env.eval(x, v)).unwrap();
        let r = ops.r_sharp(&f, &h).unwrap();
        let gain = ops.gain_sharp(&f, &f, &h).unwrap();
        for (k, ix, jv) in [(0, 10, 12), (1, 14, 7), (2, 20, 13), (2, 35, 24)] {
            let pv = ops.eval_point(g.time(k), &g.x_point(ix), &g.v_point(jv), &f, &f, &h).unwrap();
            assert_relative_eq!(r.field.get(k, ix, jv), pv.r2 + pv.r3, max_relative = 1e-10);
            assert_relative_eq!(gain.field.get(k, ix, jv), pv.gain(), max_relative = 1e-10, epsilon = 1e-300);
        }
    }

    #[test]
    fn rate_of_envelope_at_origin_matches_closed_form() {
        // gamma2 = 0 and constant b2: R2(M)(0, 0, v) = ||b2|| pi / beta in d = 2
        let (g, env) = setup(5, 5, 2);
        let kernel = KernelConfig::new(2, 0.0, BinaryAngular::Constant(0.25), 1.0, TernaryAngular::Zero).unwrap();
        let spec = QuadratureSpec { backend: Backend::Deterministic, n_v: 24, n_ang: 8, ..Default::default() };
        let ops = CollisionOperators::new(&g, env, kernel, spec).unwrap();
        let m = PhaseDensity::scaled_envelope(&g, env, 1.0).unwrap();
        let pv = ops.eval_point(0.0, &[0.0, 0.0], &[0.0, 0.0], &m, &m, &m).unwrap();
        let norm = 0.25 * 2.0 * std::f64::consts::PI;
        assert_relative_eq!(pv.r2, norm * std::f64::consts::PI, max_relative = 1e-6);
    }

    #[test]
    fn zero_ternary_kernel_gives_exact_zeros() {
        let (g, env) = setup(4, 4, 2);
        let kernel = KernelConfig::new(2, 1.0, BinaryAngular::HardSphere, 1.0, TernaryAngular::Zero).unwrap();
        let ops = CollisionOperators::new(&g, env, kernel, QuadratureSpec { n_mc: 16, ..Default::default() }).unwrap();
        let m = PhaseDensity::scaled_envelope(&g, env, 0.5).unwrap();
        assert!(ops.g3_sharp(&m, &m, &m).unwrap().field.values().iter().all(|v| *v == 0.0));
        assert!(ops.r3_sharp(&m, &m).unwrap().field.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn deterministic_backend_requires_two_dimensions() {
        let env = Maxwellian::new(1.0, 1.0).unwrap();
        let g = PhaseGrid::<f64, 3>::fitted(&env, 1e-8, 3, 3, 2, 1.0).unwrap();
        let kernel = KernelConfig::hard_sphere_with_ternary(3).unwrap();
        let spec = QuadratureSpec { backend: Backend::Deterministic, ..Default::default() };
        assert!(CollisionOperators::new(&g, env, kernel, spec).is_err());
    }
}
