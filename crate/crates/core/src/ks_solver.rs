//! Linear transported problem and the monotone bracket iteration.
//!
//! All densities are handled in transported form `f^#(t, x, v) = f(t, x + t v, v)`
//! and stored as ratios to the envelope `M`. In these variables the linear
//! problem `d f^#/dt = h^# - f^# R^#` decouples node by node.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimates::{SmallnessReport, WellposednessConstants};
use crate::operators::CollisionOperators;
use crate::phase_space::{l1_of_slice, Maxwellian, PhaseDensity, PhaseGrid, PhaseSlice};
use crate::quadrature::gauss_legendre_on;
use crate::scalar::Real;
use rand_distr::{Distribution, StandardNormal};

/// `d f^#/dt = h^# - f^# R`, `f^#(0) = f0`, with nodal rate and source.
#[derive(Clone, Debug)]
pub struct LinearProblem<T, const D: usize> {
    grid: PhaseGrid<T, D>,
    envelope: Maxwellian<T>,
    f0: Vec<T>,
    rate: Vec<T>,
    source: Vec<T>,
}

impl<T: Real, const D: usize> LinearProblem<T, D> {
    /// `rate` is `R^#` at every node, `source` is `h^# / M`.
    pub fn new(f0: &PhaseSlice<T, D>, rate: Vec<T>, source: Vec<T>) -> Result<Self> {
        let grid = f0.grid();
        for (name, v) in [("rate", &rate), ("source", &source)] {
            if v.len() != grid.len() {
                return Err(Error::DimensionMismatch(format!("{name}: expected {} values, got {}", grid.len(), v.len())));
            }
            if let Some(i) = v.iter().position(|r| !(r.is_finite() && *r >= T::zero())) {
                return Err(Error::InvalidDensity(i));
            }
        }
        Ok(Self { grid: grid.clone(), envelope: *f0.envelope(), f0: f0.ratios().to_vec(), rate, source })
    }

    /// Problem with `R = R^#(g, g)` and source `h`.
    pub fn from_inputs(
        ops: &CollisionOperators<T, D>,
        f0: &PhaseSlice<T, D>,
        g: &PhaseDensity<T, D>,
        h: &PhaseDensity<T, D>,
    ) -> Result<Self>
    where
        StandardNormal: Distribution<T>,
    {
        if !h.compatible(g) {
            return Err(Error::GridMismatch);
        }
        Self::new(f0, ops.total_rate(g, g)?, h.ratios().to_vec())
    }

    pub fn grid(&self) -> &PhaseGrid<T, D> {
        &self.grid
    }
    pub fn f0(&self) -> &[T] {
        &self.f0
    }
    pub fn rate(&self) -> &[T] {
        &self.rate
    }
    pub fn source(&self) -> &[T] {
        &self.source
    }
}

const STEP_ORDER: usize = 4;
const MAX_PANELS: usize = 256;

/// Integrating-factor recurrence with rate and source linear in time on each step:
/// `F_k = F_{k-1} exp(-int R) + int h(tau) exp(-int_tau R) d tau`, the second
/// integral by 4-point Gauss-Legendre on panels of optical depth at most one.
/// Positive weights keep the map monotone.
pub fn solve_linear<T: Real, const D: usize>(p: &LinearProblem<T, D>) -> Result<PhaseDensity<T, D>> {
    let g = &p.grid;
    let sl = g.slice_len();
    let nt = g.nt();
    let rule: Vec<(T, T)> = gauss_legendre_on(STEP_ORDER, 0.0, 1.0).into_iter().map(|(s, w)| (T::lit(s), T::lit(w))).collect();
    let half = T::lit(0.5);
    let mut out = vec![T::zero(); g.len()];
    out[..sl].copy_from_slice(&p.f0);
    for k in 1..nt {
        let dt = g.time(k) - g.time(k - 1);
        let (prev, cur) = out.split_at_mut(k * sl);
        let prev = &prev[(k - 1) * sl..];
        let cur = &mut cur[..sl];
        let r0 = &p.rate[(k - 1) * sl..k * sl];
        let r1 = &p.rate[k * sl..(k + 1) * sl];
        let h0 = &p.source[(k - 1) * sl..k * sl];
        let h1 = &p.source[k * sl..(k + 1) * sl];
        cur.par_iter_mut().enumerate().for_each(|(i, c)| {
            let (a, b) = (r0[i], r1[i] - r0[i]);
            let decay = (-dt * (a + half * b)).exp();
            let mut src = T::zero();
            if h0[i] != T::zero() || h1[i] != T::zero() {
                // panels of unit optical depth keep the rule accurate for stiff rates
                let depth = (dt * a.max(a + b)).as_f64();
                let panels = (depth.ceil() as usize).clamp(1, MAX_PANELS);
                let width = T::one() / T::from_usize_lossy(panels);
                for j in 0..panels {
                    let s0 = T::from_usize_lossy(j) * width;
                    for (u, w) in &rule {
                        let s = s0 + *u * width;
                        let h = h0[i] + (h1[i] - h0[i]) * s;
                        src = src + *w * width * h * (-dt * (a * (T::one() - s) + half * b * (T::one() - s * s))).exp();
                    }
                }
            }
            *c = prev[i] * decay + dt * src;
        });
    }
    PhaseDensity::from_ratios(g, p.envelope, out)
}

/// Per time node, the largest ratio residual of
/// `f(t) + int_0^t f R - f0 - int_0^t h`.
pub fn linear_identity_residual<T: Real, const D: usize>(p: &LinearProblem<T, D>, f: &PhaseDensity<T, D>) -> Result<Vec<T>> {
    let g = &p.grid;
    if f.grid() != g {
        return Err(Error::GridMismatch);
    }
    let loss: Vec<T> = f.ratios().iter().zip(&p.rate).map(|(a, b)| *a * *b).collect();
    let res = integral_residual(g, &p.f0, f.ratios(), &loss, &p.source);
    Ok((0..g.nt()).map(|k| res[k * g.slice_len()..(k + 1) * g.slice_len()].iter().fold(T::zero(), |m, r| m.max(r.abs()))).collect())
}

/// `f(t_k) + Q[loss](t_k) - f0 - Q[gain](t_k)` at every node, `Q` the cumulative
/// four-point rule (cubic through the neighbouring nodes, one-sided at the ends).
///
/// The solver treats rate and source as linear on each step, so the residual
/// measures the resulting second-order time error.
fn integral_residual<T: Real, const D: usize>(g: &PhaseGrid<T, D>, f0: &[T], f: &[T], loss: &[T], gain: &[T]) -> Vec<T> {
    let sl = g.slice_len();
    let nt = g.nt();
    let mut out = vec![T::zero(); g.len()];
    let mut acc = vec![T::zero(); sl];
    let q = |k: usize, i: usize| loss[k * sl + i] - gain[k * sl + i];
    let c = |x: f64| T::lit(x / 24.0);
    for k in 0..nt {
        if k > 0 {
            let dt = g.time(k) - g.time(k - 1);
            for i in 0..sl {
                let inc = if nt < 4 {
                    c(12.0) * (q(k - 1, i) + q(k, i))
                } else if k == 1 {
                    c(9.0) * q(0, i) + c(19.0) * q(1, i) - c(5.0) * q(2, i) + c(1.0) * q(3, i)
                } else if k + 1 == nt {
                    c(1.0) * q(k - 3, i) - c(5.0) * q(k - 2, i) + c(19.0) * q(k - 1, i) + c(9.0) * q(k, i)
                } else {
                    c(13.0) * (q(k - 1, i) + q(k, i)) - c(1.0) * (q(k - 2, i) + q(k + 1, i))
                };
                acc[i] = acc[i] + dt * inc;
            }
        }
        for i in 0..sl {
            out[k * sl + i] = f[k * sl + i] + acc[i] - f0[i];
        }
    }
    out
}

/// Compares two linear problems; the preconditions
/// `f0_1 <= f0_2`, `R_1 >= R_2`, `h_1 <= h_2` are checked first.
pub fn comparison_check<T: Real, const D: usize>(p1: &LinearProblem<T, D>, p2: &LinearProblem<T, D>, tol: T) -> Result<bool> {
    if p1.grid != p2.grid || p1.envelope != p2.envelope {
        return Err(Error::GridMismatch);
    }
    let leq = |a: &[T], b: &[T]| a.iter().zip(b).all(|(x, y)| *x <= *y);
    if !leq(&p1.f0, &p2.f0) || !leq(&p2.rate, &p1.rate) || !leq(&p1.source, &p2.source) {
        return Err(Error::InvalidParameter("comparison preconditions violated".into()));
    }
    let a = solve_linear(p1)?;
    let b = solve_linear(p2)?;
    Ok(a.ratios().iter().zip(b.ratios()).all(|(x, y)| *x <= *y + tol))
}

/// Stopping and tolerance settings of the iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KsSettings<T> {
    pub eps_gap: T,
    pub n_max: usize,
    pub tol_mono: T,
}

impl<T: Real> Default for KsSettings<T> {
    fn default() -> Self {
        Self { eps_gap: T::lit(1e-6), n_max: 50, tol_mono: T::lit(1e-8) }
    }
}

/// One row of the iteration trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceEntry {
    pub n: usize,
    /// `sup |u_n - l_n| / M`
    pub gap: f64,
    pub max_mono_violation: f64,
    /// Largest L1 residual of the two linear integral identities.
    #[serde(rename = "residual_L1")]
    pub residual_l1: f64,
    /// Nodes clamped back into order.
    pub clamped: usize,
}

/// Bracket `l_n <= u_n` and its history.
#[derive(Clone, Debug)]
pub struct IterationState<T, const D: usize> {
    pub n: usize,
    pub l: PhaseDensity<T, D>,
    pub u: PhaseDensity<T, D>,
    pub trace: Vec<TraceEntry>,
}

impl<T: Real, const D: usize> IterationState<T, D> {
    pub fn gap(&self) -> T {
        gap(&self.l, &self.u)
    }
}

fn gap<T: Real, const D: usize>(l: &PhaseDensity<T, D>, u: &PhaseDensity<T, D>) -> T {
    l.ratios().iter().zip(u.ratios()).fold(T::zero(), |m, (a, b)| m.max((*b - *a).abs()))
}

/// `l_0 = 0`, `u_0 = C_out M`, gated by the smallness condition unless overridden.
pub fn ks_init<T: Real, const D: usize>(
    f0: &PhaseSlice<T, D>,
    constants: &WellposednessConstants<T>,
    override_smallness: bool,
) -> Result<(PhaseDensity<T, D>, PhaseDensity<T, D>, SmallnessReport<T>)> {
    if constants.alpha != f0.envelope().alpha() || constants.beta != f0.envelope().beta() {
        return Err(Error::InvalidParameter("constants and envelope use different (alpha, beta)".into()));
    }
    let report = constants.smallness(f0.m_norm());
    let refuse = Error::SmallnessFailure { norm: report.f0_norm.as_f64(), threshold: report.threshold.as_f64() };
    if !report.accepted && !override_smallness {
        return Err(refuse);
    }
    let c_out = report.c_out.ok_or(refuse)?;
    let grid = f0.grid();
    Ok((PhaseDensity::zeros(grid, *f0.envelope()), PhaseDensity::scaled_envelope(grid, *f0.envelope(), c_out)?, report))
}

/// Worst node of one inequality of the beginning condition.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InequalityCheck {
    pub name: &'static str,
    pub violation: f64,
    pub node: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BeginningReport {
    pub checks: Vec<InequalityCheck>,
    pub passed: bool,
}

impl BeginningReport {
    /// Inequality with the largest violation.
    pub fn worst(&self) -> &InequalityCheck {
        self.checks.iter().fold(&self.checks[0], |w, c| if c.violation > w.violation { c } else { w })
    }
}

fn worst_excess<T: Real>(a: &[T], b: &[T]) -> (f64, usize) {
    // largest (a - b)_+
    let mut worst = (0.0, 0);
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let e = (*x - *y).as_f64();
        if e > worst.0 {
            worst = (e, i);
        }
    }
    worst
}

/// `0 <= l0 <= l1 <= u1 <= u0` at every node, within `tol`.
pub fn check_beginning_condition<T: Real, const D: usize>(
    l0: &PhaseDensity<T, D>,
    u0: &PhaseDensity<T, D>,
    l1: &PhaseDensity<T, D>,
    u1: &PhaseDensity<T, D>,
    tol: T,
) -> BeginningReport {
    let zeros = vec![T::zero(); l0.ratios().len()];
    let pairs: [(&'static str, &[T], &[T]); 4] = [
        ("0 <= l0", &zeros, l0.ratios()),
        ("l0 <= l1", l0.ratios(), l1.ratios()),
        ("l1 <= u1", l1.ratios(), u1.ratios()),
        ("u1 <= u0", u1.ratios(), u0.ratios()),
    ];
    let checks: Vec<InequalityCheck> = pairs
        .into_iter()
        .map(|(name, a, b)| {
            let (violation, node) = worst_excess(a, b);
            InequalityCheck { name, violation, node }
        })
        .collect();
    let passed = checks.iter().all(|c| c.violation <= tol.as_f64());
    BeginningReport { checks, passed }
}

/// Result of [`KsSolver::solve`].
#[derive(Clone, Debug)]
pub struct KsOutcome<T, const D: usize> {
    /// Bracket midpoint.
    pub f: PhaseDensity<T, D>,
    pub state: IterationState<T, D>,
    pub converged: bool,
    pub beginning: Option<BeginningReport>,
}

/// Drives the bracket iteration for a fixed operator set and initial slice.
pub struct KsSolver<'a, T, const D: usize> {
    ops: &'a CollisionOperators<T, D>,
    f0: PhaseSlice<T, D>,
    settings: KsSettings<T>,
}

impl<'a, T: Real, const D: usize> KsSolver<'a, T, D>
where
    StandardNormal: Distribution<T>,
{
    pub fn new(ops: &'a CollisionOperators<T, D>, f0: PhaseSlice<T, D>, settings: KsSettings<T>) -> Result<Self> {
        if f0.grid() != ops.grid() || f0.envelope() != ops.envelope() {
            return Err(Error::GridMismatch);
        }
        if !(settings.eps_gap >= T::zero() && settings.tol_mono >= T::zero()) {
            return Err(Error::InvalidParameter("eps_gap and tol_mono must be nonnegative".into()));
        }
        Ok(Self { ops, f0, settings })
    }

    pub fn settings(&self) -> &KsSettings<T> {
        &self.settings
    }

    /// The two linear problems of step `n`: lower and upper.
    pub fn step_problems(&self, l: &PhaseDensity<T, D>, u: &PhaseDensity<T, D>) -> Result<(LinearProblem<T, D>, LinearProblem<T, D>)> {
        let ops = self.ops;
        let lower = LinearProblem::new(&self.f0, ops.total_rate(u, u)?, ops.total_gain_ratio(l, l, l)?)?;
        let upper = LinearProblem::new(&self.f0, ops.total_rate(l, l)?, ops.total_gain_ratio(u, u, u)?)?;
        Ok((lower, upper))
    }

    fn l1_residual(&self, p: &LinearProblem<T, D>, f: &PhaseDensity<T, D>) -> f64 {
        let g = self.ops.grid();
        let loss: Vec<T> = f.ratios().iter().zip(p.rate()).map(|(a, b)| *a * *b).collect();
        let res = integral_residual(g, p.f0(), f.ratios(), &loss, p.source());
        l1_sup(g, self.ops.envelope(), &res).as_f64()
    }

    /// One iteration: `l_n` from `R(u_{n-1})` and `G(l_{n-1})`, `u_n` from
    /// `R(l_{n-1})` and `G(u_{n-1})`. Order violations up to `tol_mono` are clamped.
    pub fn step(&self, state: &IterationState<T, D>) -> Result<IterationState<T, D>> {
        let (l, u, residual) = self.advance(state)?;
        self.accept(state, l, u, residual)
    }

    /// Unclamped next bracket and its linear residual.
    fn advance(&self, state: &IterationState<T, D>) -> Result<(PhaseDensity<T, D>, PhaseDensity<T, D>, f64)> {
        let (pl, pu) = self.step_problems(&state.l, &state.u)?;
        let l = solve_linear(&pl)?;
        let u = solve_linear(&pu)?;
        let residual = self.l1_residual(&pl, &l).max(self.l1_residual(&pu, &u));
        Ok((l, u, residual))
    }

    fn accept(
        &self,
        state: &IterationState<T, D>,
        l: PhaseDensity<T, D>,
        u: PhaseDensity<T, D>,
        residual: f64,
    ) -> Result<IterationState<T, D>> {
        let (lp, up) = (state.l.ratios(), state.u.ratios());
        let mut lr = l.ratios().to_vec();
        let mut ur = u.ratios().to_vec();
        let mut violation = T::zero();
        let mut clamped = 0;
        for i in 0..lr.len() {
            let v = (lp[i] - lr[i]).max(lr[i] - ur[i]).max(ur[i] - up[i]);
            if v > T::zero() {
                violation = violation.max(v);
                clamped += 1;
                ur[i] = ur[i].min(up[i]);
                lr[i] = lr[i].max(lp[i]).min(ur[i]);
            }
        }
        if violation > self.settings.tol_mono {
            return Err(Error::MonotonicityViolation { iterate: state.n + 1, violation: violation.as_f64() });
        }
        let grid = self.ops.grid();
        let env = *self.ops.envelope();
        let l = PhaseDensity::from_ratios(grid, env, lr)?;
        let u = PhaseDensity::from_ratios(grid, env, ur)?;
        let mut trace = state.trace.clone();
        trace.push(TraceEntry {
            n: state.n + 1,
            gap: gap(&l, &u).as_f64(),
            max_mono_violation: violation.as_f64(),
            residual_l1: residual,
            clamped,
        });
        Ok(IterationState { n: state.n + 1, l, u, trace })
    }

    /// Iterates from `(l0, u0)`, checking the beginning condition after the
    /// first step, until the gap is below `eps_gap` or `n_max` is reached.
    /// `observer` sees every accepted state.
    pub fn solve(
        &self,
        l0: PhaseDensity<T, D>,
        u0: PhaseDensity<T, D>,
        observer: impl FnMut(&IterationState<T, D>) -> Result<()>,
    ) -> Result<KsOutcome<T, D>> {
        let start = IterationState { n: 0, l: l0, u: u0, trace: Vec::new() };
        self.resume(start, observer)
    }

    /// Continues an iteration from any accepted state.
    pub fn resume(
        &self,
        start: IterationState<T, D>,
        mut observer: impl FnMut(&IterationState<T, D>) -> Result<()>,
    ) -> Result<KsOutcome<T, D>> {
        let mut beginning = None;
        let mut state = start;
        while state.n < self.settings.n_max && !(state.n > 0 && state.gap() <= self.settings.eps_gap) {
            let (l, u, residual) = self.advance(&state)?;
            if state.n == 0 {
                let report = check_beginning_condition(&state.l, &state.u, &l, &u, self.settings.tol_mono);
                if !report.passed {
                    return Err(Error::BeginningCondition(report.worst().violation));
                }
                beginning = Some(report);
            }
            state = self.accept(&state, l, u, residual)?;
            observer(&state)?;
        }
        let converged = state.n > 0 && state.gap() <= self.settings.eps_gap;
        let half = T::lit(0.5);
        let mid: Vec<T> = state.l.ratios().iter().zip(state.u.ratios()).map(|(a, b)| half * (*a + *b)).collect();
        let f = PhaseDensity::from_ratios(self.ops.grid(), *self.ops.envelope(), mid)?;
        Ok(KsOutcome { f, state, converged, beginning })
    }
}

/// `max_k ||r(t_k) M||_{L1}` for a ratio field `r`.
fn l1_sup<T: Real, const D: usize>(g: &PhaseGrid<T, D>, env: &Maxwellian<T>, ratios: &[T]) -> T {
    l1_per_time(g, env, ratios).into_iter().fold(T::zero(), T::max)
}

fn l1_per_time<T: Real, const D: usize>(g: &PhaseGrid<T, D>, env: &Maxwellian<T>, ratios: &[T]) -> Vec<T> {
    let (mx, mv) = g.envelope_tables(env);
    let sl = g.slice_len();
    let nv = g.v_nodes();
    (0..g.nt())
        .map(|k| {
            let raw: Vec<T> = ratios[k * sl..(k + 1) * sl].iter().enumerate().map(|(s, r)| *r * mx[s / nv] * mv[s % nv]).collect();
            l1_of_slice(g, &raw)
        })
        .collect()
}

/// L1 residual of the mild equation `f^# + int L^#(f, f, f) - f0 - int G^#(f, f, f)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MildResidual<T> {
    pub per_time: Vec<T>,
    pub max: T,
}

/// Evaluates the mild-equation residual of `f` at every time node.
pub fn mild_residual<T: Real, const D: usize>(
    ops: &CollisionOperators<T, D>,
    f0: &PhaseSlice<T, D>,
    f: &PhaseDensity<T, D>,
) -> Result<MildResidual<T>>
where
    StandardNormal: Distribution<T>,
{
    let g = ops.grid();
    if f0.grid() != g || f.grid() != g {
        return Err(Error::GridMismatch);
    }
    let rate = ops.total_rate(f, f)?;
    let gain = ops.total_gain_ratio(f, f, f)?;
    let loss: Vec<T> = f.ratios().iter().zip(&rate).map(|(a, b)| *a * *b).collect();
    let res = integral_residual(g, f0.ratios(), f.ratios(), &loss, &gain);
    let per_time = l1_per_time(g, ops.envelope(), &res);
    let max = per_time.iter().fold(T::zero(), |m, r| m.max(*r));
    Ok(MildResidual { per_time, max })
}
