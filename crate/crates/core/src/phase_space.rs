//! Phase-space grids, Maxwellian envelopes and sampled densities.
//!
//! A density is stored as its ratio to the envelope `M(x, v)` at every grid
//! node. Off-grid values are produced by multilinear interpolation of that
//! ratio followed by multiplication with the exact envelope at the query
//! point, which keeps interpolation monotone and reproduces `c * M` exactly.

use crate::error::{Error, Result};
use crate::scalar::{vecn, Real};

/// Spatial dimension, restricted to the supported range `2..=3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dim(usize);

impl Dim {
    pub fn new(d: usize) -> Result<Self> {
        if (2..=3).contains(&d) {
            Ok(Dim(d))
        } else {
            Err(Error::Unsupported(format!("dimension {d} (supported: 2, 3)")))
        }
    }

    pub fn get(self) -> usize {
        self.0
    }
}

/// `M(x, v) = exp(-alpha |x|^2) exp(-beta |v|^2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Maxwellian<T> {
    alpha: T,
    beta: T,
}

impl<T: Real> Maxwellian<T> {
    pub fn new(alpha: T, beta: T) -> Result<Self> {
        if !(alpha > T::zero() && alpha.is_finite() && beta > T::zero() && beta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "envelope parameters must be positive and finite (alpha = {alpha}, beta = {beta})"
            )));
        }
        Ok(Self { alpha, beta })
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn beta(&self) -> T {
        self.beta
    }

    #[inline]
    pub fn spatial<const D: usize>(&self, x: &[T; D]) -> T {
        (-self.alpha * vecn::norm_sq(x)).exp()
    }

    #[inline]
    pub fn velocity<const D: usize>(&self, v: &[T; D]) -> T {
        (-self.beta * vecn::norm_sq(v)).exp()
    }

    #[inline]
    pub fn eval<const D: usize>(&self, x: &[T; D], v: &[T; D]) -> T {
        self.spatial(x) * self.velocity(v)
    }
}

/// Numerical tolerances shared across the solver.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerances<T> {
    /// Interpolation / quadrature tolerance.
    pub interp: T,
    /// Envelope truncation: the box must satisfy `exp(-beta R_v^2) <= envelope`.
    pub envelope: T,
    /// Absolute tolerance on envelope-normalized values for ordering checks.
    pub mono: T,
}

impl<T: Real> Default for Tolerances<T> {
    fn default() -> Self {
        Self { interp: T::lit(1e-6), envelope: T::lit(1e-8), mono: T::lit(1e-8) }
    }
}

/// Location of a coordinate inside a uniform axis: lower node and weight of the upper node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisCell<T> {
    pub lower: usize,
    pub theta: T,
}

/// Uniform tensor grid on `[0, T] x [-R_x, R_x]^D x [-R_v, R_v]^D`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseGrid<T, const D: usize> {
    rx: T,
    rv: T,
    nx: usize,
    nv: usize,
    nt: usize,
    t_max: T,
}

fn ipow(n: usize, d: usize) -> usize {
    (0..d).fold(1, |acc, _| acc * n)
}

impl<T: Real, const D: usize> PhaseGrid<T, D> {
    pub fn new(rx: T, rv: T, nx: usize, nv: usize, nt: usize, t_max: T) -> Result<Self> {
        Dim::new(D)?;
        if !(rx > T::zero() && rx.is_finite() && rv > T::zero() && rv.is_finite()) {
            return Err(Error::InvalidParameter("box radii must be positive".into()));
        }
        if nx < 2 || nv < 2 || nt < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least two nodes per axis (nx = {nx}, nv = {nv}, nt = {nt})"
            )));
        }
        if !(t_max > T::zero() && t_max.is_finite()) {
            return Err(Error::InvalidParameter("t_max must be positive".into()));
        }
        Ok(Self { rx, rv, nx, nv, nt, t_max })
    }

    /// Grid whose radii are the smallest satisfying the envelope truncation tolerance.
    pub fn fitted(env: &Maxwellian<T>, tol: T, nx: usize, nv: usize, nt: usize, t_max: T) -> Result<Self> {
        if !(tol > T::zero() && tol < T::one()) {
            return Err(Error::InvalidParameter(format!("truncation tolerance {tol} not in (0, 1)")));
        }
        let l = -tol.ln();
        Self::new((l / env.alpha()).sqrt(), (l / env.beta()).sqrt(), nx, nv, nt, t_max)
    }

    /// Checks `exp(-beta R_v^2) <= tol` and `exp(-alpha R_x^2) <= tol`.
    pub fn check_truncation(&self, env: &Maxwellian<T>, tol: T) -> Result<()> {
        let slack = T::one() + T::lit(1e-9);
        for value in [(-env.beta() * self.rv * self.rv).exp(), (-env.alpha() * self.rx * self.rx).exp()] {
            if value > tol * slack {
                return Err(Error::TruncationTooCoarse { value: value.as_f64(), tol: tol.as_f64() });
            }
        }
        Ok(())
    }

    pub fn rx(&self) -> T {
        self.rx
    }
    pub fn rv(&self) -> T {
        self.rv
    }
    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn nv(&self) -> usize {
        self.nv
    }
    pub fn nt(&self) -> usize {
        self.nt
    }
    pub fn t_max(&self) -> T {
        self.t_max
    }
    pub fn hx(&self) -> T {
        (self.rx + self.rx) / T::from_usize_lossy(self.nx - 1)
    }
    pub fn hv(&self) -> T {
        (self.rv + self.rv) / T::from_usize_lossy(self.nv - 1)
    }
    pub fn dt(&self) -> T {
        self.t_max / T::from_usize_lossy(self.nt - 1)
    }
    pub fn time(&self, k: usize) -> T {
        if k + 1 == self.nt {
            self.t_max
        } else {
            T::from_usize_lossy(k) * self.dt()
        }
    }
    pub fn x_coord(&self, i: usize) -> T {
        -self.rx + T::from_usize_lossy(i) * self.hx()
    }
    pub fn v_coord(&self, j: usize) -> T {
        -self.rv + T::from_usize_lossy(j) * self.hv()
    }

    /// Number of spatial nodes (`nx^D`).
    pub fn x_nodes(&self) -> usize {
        ipow(self.nx, D)
    }
    /// Number of velocity nodes (`nv^D`).
    pub fn v_nodes(&self) -> usize {
        ipow(self.nv, D)
    }
    /// Nodes in one time slice.
    pub fn slice_len(&self) -> usize {
        self.x_nodes() * self.v_nodes()
    }
    /// Total number of nodes, row-major in `(t, x, v)`.
    pub fn len(&self) -> usize {
        self.nt * self.slice_len()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, k: usize, ix: usize, jv: usize) -> usize {
        (k * self.x_nodes() + ix) * self.v_nodes() + jv
    }

    /// Per-axis indices of a flat row-major index on an `n^D` lattice.
    #[inline]
    pub fn unravel(flat: usize, n: usize) -> [usize; D] {
        let mut out = [0usize; D];
        let mut r = flat;
        for a in (0..D).rev() {
            out[a] = r % n;
            r /= n;
        }
        out
    }

    #[inline]
    pub fn ravel(idx: &[usize; D], n: usize) -> usize {
        idx.iter().fold(0, |acc, &i| acc * n + i)
    }

    pub fn x_point(&self, ix: usize) -> [T; D] {
        let idx = Self::unravel(ix, self.nx);
        let mut p = [T::zero(); D];
        for a in 0..D {
            p[a] = self.x_coord(idx[a]);
        }
        p
    }

    pub fn v_point(&self, jv: usize) -> [T; D] {
        let idx = Self::unravel(jv, self.nv);
        let mut p = [T::zero(); D];
        for a in 0..D {
            p[a] = self.v_coord(idx[a]);
        }
        p
    }

    fn locate(coord: T, r: T, h: T, n: usize) -> Option<AxisCell<T>> {
        let pos = (coord + r) / h;
        let last = T::from_usize_lossy(n - 1);
        let slack = T::lit(1e-12) * last;
        if !(pos >= -slack && pos <= last + slack) {
            return None;
        }
        let pos = pos.max(T::zero()).min(last);
        let lower = pos.floor().to_usize().unwrap_or(0).min(n - 2);
        Some(AxisCell { lower, theta: pos - T::from_usize_lossy(lower) })
    }

    pub fn locate_x(&self, c: T) -> Option<AxisCell<T>> {
        Self::locate(c, self.rx, self.hx(), self.nx)
    }

    pub fn locate_v(&self, c: T) -> Option<AxisCell<T>> {
        Self::locate(c, self.rv, self.hv(), self.nv)
    }

    /// Locates `t` between time nodes; `None` outside `[0, t_max]`.
    pub fn locate_t(&self, t: T) -> Option<AxisCell<T>> {
        let pos = t / self.dt();
        let last = T::from_usize_lossy(self.nt - 1);
        if !(pos >= -T::lit(1e-12) && pos <= last + T::lit(1e-12) * last) {
            return None;
        }
        let pos = pos.max(T::zero()).min(last);
        let lower = pos.floor().to_usize().unwrap_or(0).min(self.nt - 2);
        Some(AxisCell { lower, theta: pos - T::from_usize_lossy(lower) })
    }

    /// Trapezoid weight of node `i` along a spatial axis.
    pub fn x_weight(&self, i: usize) -> T {
        trapezoid_weight(i, self.nx, self.hx())
    }

    pub fn v_weight(&self, j: usize) -> T {
        trapezoid_weight(j, self.nv, self.hv())
    }

    /// Tensor trapezoid weights of all spatial nodes.
    pub fn x_weights(&self) -> Vec<T> {
        (0..self.x_nodes())
            .map(|ix| Self::unravel(ix, self.nx).iter().fold(T::one(), |w, &i| w * self.x_weight(i)))
            .collect()
    }

    pub fn v_weights(&self) -> Vec<T> {
        (0..self.v_nodes())
            .map(|jv| Self::unravel(jv, self.nv).iter().fold(T::one(), |w, &j| w * self.v_weight(j)))
            .collect()
    }

    /// Envelope factors at the nodes: `(exp(-alpha|x_i|^2), exp(-beta|v_j|^2))`.
    pub fn envelope_tables(&self, env: &Maxwellian<T>) -> (Vec<T>, Vec<T>) {
        let mx = (0..self.x_nodes()).map(|ix| env.spatial(&self.x_point(ix))).collect();
        let mv = (0..self.v_nodes()).map(|jv| env.velocity(&self.v_point(jv))).collect();
        (mx, mv)
    }

    /// Same grid with a different number of time nodes.
    pub fn with_time_nodes(&self, nt: usize) -> Result<Self> {
        Self::new(self.rx, self.rv, self.nx, self.nv, nt, self.t_max)
    }
}

fn trapezoid_weight<T: Real>(i: usize, n: usize, h: T) -> T {
    if i == 0 || i + 1 == n {
        h * T::lit(0.5)
    } else {
        h
    }
}

/// Raw nodal values on a phase grid, without an envelope certificate.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseField<T, const D: usize> {
    grid: PhaseGrid<T, D>,
    values: Vec<T>,
}

impl<T: Real, const D: usize> PhaseField<T, D> {
    pub fn zeros(grid: &PhaseGrid<T, D>) -> Self {
        Self { grid: grid.clone(), values: vec![T::zero(); grid.len()] }
    }

    pub fn from_values(grid: &PhaseGrid<T, D>, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        Ok(Self { grid: grid.clone(), values })
    }

    /// Samples `f(t, x, v)` at every node.
    pub fn from_fn(grid: &PhaseGrid<T, D>, f: impl Fn(T, &[T; D], &[T; D]) -> T) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for k in 0..grid.nt() {
            let t = grid.time(k);
            for ix in 0..grid.x_nodes() {
                let x = grid.x_point(ix);
                for jv in 0..grid.v_nodes() {
                    values.push(f(t, &x, &grid.v_point(jv)));
                }
            }
        }
        Self { grid: grid.clone(), values }
    }

    pub fn grid(&self) -> &PhaseGrid<T, D> {
        &self.grid
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn get(&self, k: usize, ix: usize, jv: usize) -> T {
        self.values[self.grid.index(k, ix, jv)]
    }

    pub fn slice(&self, k: usize) -> &[T] {
        let n = self.grid.slice_len();
        &self.values[k * n..(k + 1) * n]
    }

    /// Trapezoid approximation of `int |f(t_k, x, v)| dx dv`.
    pub fn l1_norm(&self, k: usize) -> T {
        l1_of_slice(&self.grid, self.slice(k))
    }

    /// Multilinear interpolation in `x` at velocity node `jv`; zero outside the box.
    pub fn interp_x(&self, k: usize, x: &[T; D], jv: usize) -> T {
        let g = &self.grid;
        let mut cells = [AxisCell { lower: 0, theta: T::zero() }; D];
        for a in 0..D {
            match g.locate_x(x[a]) {
                Some(c) => cells[a] = c,
                None => return T::zero(),
            }
        }
        let mut acc = T::zero();
        for corner in 0..(1usize << D) {
            let mut w = T::one();
            let mut idx = [0usize; D];
            for a in 0..D {
                let up = (corner >> a) & 1 == 1;
                idx[a] = cells[a].lower + up as usize;
                w = w * if up { cells[a].theta } else { T::one() - cells[a].theta };
            }
            if w != T::zero() {
                acc = acc + w * self.values[g.index(k, PhaseGrid::<T, D>::ravel(&idx, g.nx()), jv)];
            }
        }
        acc
    }

    /// `g(t, x, v) = f(t, x + sign * t v, v)`; `sign = +1` is the forward
    /// transport `f -> f^#`, `sign = -1` its inverse.
    pub fn transport(&self, sign: T) -> Self {
        let g = &self.grid;
        let mut out = Vec::with_capacity(g.len());
        for k in 0..g.nt() {
            let t = g.time(k);
            for ix in 0..g.x_nodes() {
                let x = g.x_point(ix);
                for jv in 0..g.v_nodes() {
                    let v = g.v_point(jv);
                    let q = vecn::axpy(&x, sign * t, &v);
                    out.push(self.interp_x(k, &q, jv));
                }
            }
        }
        Self { grid: g.clone(), values: out }
    }
}

pub(crate) fn l1_of_slice<T: Real, const D: usize>(grid: &PhaseGrid<T, D>, slice: &[T]) -> T {
    let wx = grid.x_weights();
    let wv = grid.v_weights();
    let nv = grid.v_nodes();
    let mut acc = T::zero();
    for (ix, wxi) in wx.iter().enumerate() {
        let mut row = T::zero();
        for (jv, wvj) in wv.iter().enumerate() {
            row = row + *wvj * slice[ix * nv + jv].abs();
        }
        acc = acc + *wxi * row;
    }
    acc
}

/// A single `(x, v)` slice stored as ratios to the envelope.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSlice<T, const D: usize> {
    grid: PhaseGrid<T, D>,
    envelope: Maxwellian<T>,
    ratios: Vec<T>,
}

impl<T: Real, const D: usize> PhaseSlice<T, D> {
    /// Slice from envelope ratios; negative or non-finite ratios are rejected.
    pub fn from_ratios(grid: &PhaseGrid<T, D>, envelope: Maxwellian<T>, ratios: Vec<T>) -> Result<Self> {
        if ratios.len() != grid.slice_len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} slice values, got {}",
                grid.slice_len(),
                ratios.len()
            )));
        }
        if let Some(i) = ratios.iter().position(|r| !(r.is_finite() && *r >= T::zero())) {
            return Err(Error::InvalidDensity(i));
        }
        Ok(Self { grid: grid.clone(), envelope, ratios })
    }

    /// Samples `f(x, v)` at the nodes.
    pub fn from_fn(grid: &PhaseGrid<T, D>, envelope: Maxwellian<T>, f: impl Fn(&[T; D], &[T; D]) -> T) -> Result<Self> {
        let mut ratios = Vec::with_capacity(grid.slice_len());
        for ix in 0..grid.x_nodes() {
            let x = grid.x_point(ix);
            for jv in 0..grid.v_nodes() {
                let v = grid.v_point(jv);
                ratios.push(f(&x, &v) / envelope.eval(&x, &v));
            }
        }
        Self::from_ratios(grid, envelope, ratios)
    }

    /// `c * M` sampled on the grid.
    pub fn scaled_envelope(grid: &PhaseGrid<T, D>, envelope: Maxwellian<T>, c: T) -> Result<Self> {
        Self::from_ratios(grid, envelope, vec![c; grid.slice_len()])
    }

    pub fn grid(&self) -> &PhaseGrid<T, D> {
        &self.grid
    }
    pub fn envelope(&self) -> &Maxwellian<T> {
        &self.envelope
    }
    pub fn ratios(&self) -> &[T] {
        &self.ratios
    }

    /// `max f / M` over the nodes.
    pub fn m_norm(&self) -> T {
        self.ratios.iter().fold(T::zero(), |m, &r| m.max(r))
    }

    pub fn value(&self, ix: usize, jv: usize) -> T {
        self.ratios[ix * self.grid.v_nodes() + jv] * self.envelope.eval(&self.grid.x_point(ix), &self.grid.v_point(jv))
    }
}

/// Nonnegative sampled density `f^#(t, x, v)` with an envelope certificate
/// `f^# <= envelope_bound * M` at every node.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseDensity<T, const D: usize> {
    grid: PhaseGrid<T, D>,
    envelope: Maxwellian<T>,
    ratios: Vec<T>,
    envelope_bound: T,
}

impl<T: Real, const D: usize> PhaseDensity<T, D> {
    /// Density from envelope ratios with the smallest valid bound.
    pub fn from_ratios(grid: &PhaseGrid<T, D>, envelope: Maxwellian<T>, ratios: Vec<T>) -> Result<Self> {
        if ratios.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!("expected {} values, got {}", grid.len(), ratios.len())));
        }
        let mut bound = T::zero();
        for (i, r) in ratios.iter().enumerate() {
            if !(r.is_finite() && *r >= T::zero()) {
                return Err(Error::InvalidDensity(i));
            }
            bound = bound.max(*r);
        }
        Ok(Self { grid: grid.clone(), envelope, ratios, envelope_bound: bound })
    }

    /// Density from raw nodal values; any node with `f > bound * M` is rejected.
    pub fn with_bound(grid: &PhaseGrid<T, D>, envelope: Maxwellian<T>, values: &[T], bound: T) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!("expected {} values, got {}", grid.len(), values.len())));
        }
        let (mx, mv) = grid.envelope_tables(&envelope);
        let nv = grid.v_nodes();
        let mut ratios = Vec::with_capacity(values.len());
        let slack = T::one() + T::epsilon() * T::lit(8.0);
        for (i, &f) in values.iter().enumerate() {
            if !(f.is_finite() && f >= T::zero()) {
                return Err(Error::InvalidDensity(i));
            }
            let s = i % grid.slice_len();
            let r = f / (mx[s / nv] * mv[s % nv]);
            if r > bound * slack {
                return Err(Error::EnvelopeViolation { node: i, ratio: r.as_f64(), bound: bound.as_f64() });
            }
            ratios.push(r);
        }
        Ok(Self { grid: grid.clone(), envelope, ratios, envelope_bound: bound })
    }

    /// Samples `f(t, x, v)` and certifies it against `bound`.
    pub fn from_fn(
        grid: &PhaseGrid<T, D>,
        envelope: Maxwellian<T>,
        bound: T,
        f: impl Fn(T, &[T; D], &[T; D]) -> T,
    ) -> Result<Self> {
        let field = PhaseField::from_fn(grid, f);
        Self::with_bound(grid, envelope, field.values(), bound)
    }

    /// Time-independent `c * M`.
    pub fn scaled_envelope(grid: &PhaseGrid<T, D>, envelope: Maxwellian<T>, c: T) -> Result<Self> {
        Self::from_ratios(grid, envelope, vec![c; grid.len()])
    }

    pub fn zeros(grid: &PhaseGrid<T, D>, envelope: Maxwellian<T>) -> Self {
        Self { grid: grid.clone(), envelope, ratios: vec![T::zero(); grid.len()], envelope_bound: T::zero() }
    }

    /// Repeats a slice at every time node.
    pub fn constant_in_time(slice: &PhaseSlice<T, D>) -> Self {
        let g = slice.grid();
        let mut ratios = Vec::with_capacity(g.len());
        for _ in 0..g.nt() {
            ratios.extend_from_slice(slice.ratios());
        }
        Self { grid: g.clone(), envelope: *slice.envelope(), ratios, envelope_bound: slice.m_norm() }
    }

    pub fn grid(&self) -> &PhaseGrid<T, D> {
        &self.grid
    }
    pub fn envelope(&self) -> &Maxwellian<T> {
        &self.envelope
    }
    pub fn envelope_bound(&self) -> T {
        self.envelope_bound
    }
    /// Envelope ratios `f^# / M`, row-major in `(t, x, v)`.
    pub fn ratios(&self) -> &[T] {
        &self.ratios
    }
    pub fn slice_ratios(&self, k: usize) -> &[T] {
        let n = self.grid.slice_len();
        &self.ratios[k * n..(k + 1) * n]
    }

    pub fn is_zero(&self) -> bool {
        self.ratios.iter().all(|r| *r == T::zero())
    }

    pub fn ratio(&self, k: usize, ix: usize, jv: usize) -> T {
        self.ratios[self.grid.index(k, ix, jv)]
    }

    pub fn value(&self, k: usize, ix: usize, jv: usize) -> T {
        self.ratio(k, ix, jv) * self.envelope.eval(&self.grid.x_point(ix), &self.grid.v_point(jv))
    }

    /// `max_{x, v} f^#(t_k) / M`.
    pub fn m_norm(&self, k: usize) -> T {
        self.slice_ratios(k).iter().fold(T::zero(), |m, &r| m.max(r))
    }

    /// `sup_t max_{x, v} f^# / M`.
    pub fn m_norm_sup(&self) -> T {
        self.ratios.iter().fold(T::zero(), |m, &r| m.max(r))
    }

    /// Raw nodal values.
    pub fn to_field(&self) -> PhaseField<T, D> {
        let (mx, mv) = self.grid.envelope_tables(&self.envelope);
        let nv = self.grid.v_nodes();
        let sl = self.grid.slice_len();
        let values = self
            .ratios
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let s = i % sl;
                *r * mx[s / nv] * mv[s % nv]
            })
            .collect();
        PhaseField { grid: self.grid.clone(), values }
    }

    pub fn l1_norm(&self, k: usize) -> T {
        let (mx, mv) = self.grid.envelope_tables(&self.envelope);
        let nv = self.grid.v_nodes();
        let raw: Vec<T> = self.slice_ratios(k).iter().enumerate().map(|(s, r)| *r * mx[s / nv] * mv[s % nv]).collect();
        l1_of_slice(&self.grid, &raw)
    }

    /// Envelope-normalized multilinear interpolation at `(t, x, v)`; zero outside the box.
    pub fn interp(&self, t: T, x: &[T; D], v: &[T; D]) -> T {
        let g = &self.grid;
        let Some(tc) = g.locate_t(t) else { return T::zero() };
        let mut xc = [AxisCell { lower: 0, theta: T::zero() }; D];
        let mut vc = xc;
        for a in 0..D {
            match (g.locate_x(x[a]), g.locate_v(v[a])) {
                (Some(cx), Some(cv)) => {
                    xc[a] = cx;
                    vc[a] = cv;
                }
                _ => return T::zero(),
            }
        }
        let mut acc = T::zero();
        for dt in 0..2usize {
            let wt = if dt == 1 { tc.theta } else { T::one() - tc.theta };
            if wt == T::zero() {
                continue;
            }
            let k = tc.lower + dt;
            for cx in 0..(1usize << D) {
                let mut wx = wt;
                let mut ix = [0usize; D];
                for a in 0..D {
                    let up = (cx >> a) & 1 == 1;
                    ix[a] = xc[a].lower + up as usize;
                    wx = wx * if up { xc[a].theta } else { T::one() - xc[a].theta };
                }
                if wx == T::zero() {
                    continue;
                }
                let ixf = PhaseGrid::<T, D>::ravel(&ix, g.nx());
                for cv in 0..(1usize << D) {
                    let mut w = wx;
                    let mut jv = [0usize; D];
                    for a in 0..D {
                        let up = (cv >> a) & 1 == 1;
                        jv[a] = vc[a].lower + up as usize;
                        w = w * if up { vc[a].theta } else { T::one() - vc[a].theta };
                    }
                    if w != T::zero() {
                        acc = acc + w * self.ratios[g.index(k, ixf, PhaseGrid::<T, D>::ravel(&jv, g.nv()))];
                    }
                }
            }
        }
        acc * self.envelope.eval(x, v)
    }

    /// Checks that two densities live on the same grid with the same envelope.
    pub fn compatible(&self, other: &Self) -> bool {
        self.grid == other.grid && self.envelope == other.envelope
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid2(nx: usize, nv: usize, nt: usize) -> PhaseGrid<f64, 2> {
        PhaseGrid::new(2.0, 2.0, nx, nv, nt, 1.0).unwrap()
    }

    #[test]
    fn maxwellian_value() {
        let m = Maxwellian::new(0.5, 2.0).unwrap();
        assert_relative_eq!(m.eval(&[2.0, 0.0], &[1.0, 1.0]), (-6.0f64).exp(), max_relative = 1e-14);
        assert!(Maxwellian::new(0.0, 1.0).is_err());
        assert!(Maxwellian::new(1.0, -1.0).is_err());
    }

    #[test]
    fn transport_of_spatial_gaussian() {
        let g = grid2(5, 5, 2);
        let f = PhaseField::from_fn(&g, |_, x, _| (-vecn::norm_sq(x)).exp());
        let s = f.transport(1.0);
        // x = 0, v = (1, 0) at t = 1
        let ix = PhaseGrid::<f64, 2>::ravel(&[2, 2], 5);
        let jv = PhaseGrid::<f64, 2>::ravel(&[3, 2], 5);
        assert_relative_eq!(s.get(1, ix, jv), (-1.0f64).exp(), max_relative = 1e-14);
    }

    #[test]
    fn l1_of_maxwellian() {
        let env = Maxwellian::new(1.0, 1.0).unwrap();
        let g = PhaseGrid::<f64, 2>::new(6.0, 6.0, 41, 41, 2, 1.0).unwrap();
        let s = PhaseSlice::scaled_envelope(&g, env, 1.0).unwrap();
        let d = PhaseDensity::constant_in_time(&s);
        let pi = std::f64::consts::PI;
        assert_relative_eq!(d.l1_norm(0), pi * pi, max_relative = 1e-10);
    }

    #[test]
    fn fitted_radius_meets_truncation() {
        let env = Maxwellian::new(1.0, 2.0).unwrap();
        let g = PhaseGrid::<f64, 2>::fitted(&env, 1e-8, 4, 4, 2, 1.0).unwrap();
        g.check_truncation(&env, 1e-8).unwrap();
        let coarse = PhaseGrid::<f64, 2>::new(1.0, 1.0, 4, 4, 2, 1.0).unwrap();
        assert!(coarse.check_truncation(&env, 1e-8).is_err());
    }

    #[test]
    fn envelope_certificate_rejects_violations() {
        let env = Maxwellian::new(1.0, 1.0).unwrap();
        let g = grid2(3, 3, 2);
        assert!(PhaseDensity::from_fn(&g, env, 0.5, |_, x, v| 0.5 * env.eval(x, v)).is_ok());
        let err = PhaseDensity::from_fn(&g, env, 0.5, |_, x, v| 0.6 * env.eval(x, v)).unwrap_err();
        assert!(matches!(err, Error::EnvelopeViolation { .. }));
        assert!(PhaseDensity::from_fn(&g, env, 1.0, |_, _, _| -1.0).is_err());
    }

    #[test]
    fn normalized_interpolation_is_exact_for_scaled_envelope() {
        let env = Maxwellian::new(1.0, 1.0).unwrap();
        let g = grid2(6, 7, 3);
        let d = PhaseDensity::scaled_envelope(&g, env, 0.25).unwrap();
        let x = [0.31, -1.27];
        let v = [-0.4, 1.9];
        assert_relative_eq!(d.interp(0.37, &x, &v), 0.25 * env.eval(&x, &v), max_relative = 1e-14);
        assert_eq!(d.interp(0.3, &[2.5, 0.0], &v), 0.0);
    }

    #[test]
    fn interp_reproduces_nodes() {
        let env = Maxwellian::new(1.0, 1.0).unwrap();
        let g = grid2(4, 5, 3);
        let d = PhaseDensity::from_fn(&g, env, 10.0, |t, x, v| (1.0 + t + x[0] * x[0] + v[1]).abs() * env.eval(x, v)).unwrap();
        for (k, ix, jv) in [(0, 3, 7), (2, 15, 24), (1, 0, 0), (2, 5, 12)] {
            let val = d.interp(g.time(k), &g.x_point(ix), &g.v_point(jv));
            assert_relative_eq!(val, d.value(k, ix, jv), max_relative = 1e-12);
        }
    }

    #[test]
    fn ravel_round_trip() {
        for flat in 0..125 {
            let idx = PhaseGrid::<f64, 3>::unravel(flat, 5);
            assert_eq!(PhaseGrid::<f64, 3>::ravel(&idx, 5), flat);
        }
    }
}
