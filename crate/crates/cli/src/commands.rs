//! The four subcommands. Each returns its report and writes its artifacts
//! under the configured output directory.

use std::path::PathBuf;
use std::time::Instant;

use bintern::collision_maps::{sample_sphere, sample_sphere_pair, BinaryFrame, TernaryFrame};
use bintern::cross_sections::KernelConfig;
use bintern::estimates::{self, Certificate, SmallnessReport, WellposednessConstants};
use bintern::ks_solver::{ks_init, mild_residual, IterationState, KsSettings, KsSolver};
use bintern::operators::CollisionOperators;
use bintern::phase_space::{Maxwellian, PhaseDensity, PhaseGrid, PhaseSlice};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::config::{InitialData, RunConfig};
use crate::output::{self, CheckpointHeader, GridSpec, TraceRecord};
use crate::CliError;

/// Tolerance on conservation, specular and involution residuals.
pub const FRAME_TOL: f64 = 1e-12;
/// Relative tolerance of the time-lemma equality case.
pub const TIME_EQUALITY_TOL: f64 = 1e-10;

// RNG streams derived from the config seed.
const STREAM_POINTS: u64 = 11;
const STREAM_FRAMES: u64 = 12;
const STREAM_SPEEDS: u64 = 13;
const STREAM_TIME: u64 = 14;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn envelope(cfg: &RunConfig) -> Result<Maxwellian<f64>, CliError> {
    Ok(Maxwellian::new(cfg.alpha, cfg.beta)?)
}

pub fn constants_of(cfg: &RunConfig, kernel: &KernelConfig<f64>) -> Result<WellposednessConstants<f64>, CliError> {
    let norms = kernel.angular_norms()?;
    Ok(WellposednessConstants::compute(cfg.alpha, cfg.beta, kernel, &norms, cfg.c_d_mode)?)
}

/// Grid with the configured radii, or radii fitted to the truncation tolerance.
pub fn grid_of<const D: usize>(cfg: &RunConfig, env: &Maxwellian<f64>) -> Result<PhaseGrid<f64, D>, CliError> {
    let fitted = PhaseGrid::<f64, D>::fitted(env, cfg.truncation_tol, cfg.nx, cfg.nv, cfg.nt, cfg.t_max)?;
    let grid = PhaseGrid::new(cfg.rx.unwrap_or(fitted.rx()), cfg.rv.unwrap_or(fitted.rv()), cfg.nx, cfg.nv, cfg.nt, cfg.t_max)?;
    grid.check_truncation(env, cfg.truncation_tol)?;
    Ok(grid)
}

#[derive(Clone, Debug, Serialize)]
pub struct ConstantsReport {
    pub constants: WellposednessConstants<f64>,
    pub a_coefficient: f64,
    pub c_d_candidates: Vec<(String, f64)>,
}

/// `constants`: every constant of the iteration, written to `constants.json`.
pub fn run_constants(cfg: &RunConfig) -> Result<ConstantsReport, CliError> {
    let kernel = cfg.kernel().map_err(CliError::Setup)?;
    let constants = constants_of(cfg, &kernel)?;
    let report = ConstantsReport {
        a_coefficient: constants.a_coefficient(),
        c_d_candidates: estimates::c_d_candidates(cfg.dim).into_iter().map(|(n, c)| (n.to_string(), c)).collect(),
        constants,
    };
    output::ensure_dir(&cfg.output_dir)?;
    output::write_json(&cfg.output_dir.join("constants.json"), &cfg.hash(), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub certificates: Vec<Certificate>,
    /// Reported but not required to pass.
    pub diagnostics: Vec<Certificate>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.certificates.iter().all(Certificate::passed)
    }
}

fn certificate(name: &str, ratios: impl IntoIterator<Item = f64>) -> Certificate {
    let mut c = Certificate { name: name.into(), samples: 0, worst_ratio: 0.0, violations: 0 };
    for r in ratios {
        c.samples += 1;
        c.worst_ratio = if r.is_nan() { f64::INFINITY } else { c.worst_ratio.max(r) };
        if !(r <= 1.0) {
            c.violations += 1;
        }
    }
    c
}

/// Frame residual certificates; each ratio is residual / [`FRAME_TOL`].
pub fn frame_certificates<const D: usize>(kernel: &KernelConfig<f64>, beta: f64, n: usize, seed: u64) -> Result<Vec<Certificate>, CliError> {
    let mut rng = rng(seed, STREAM_FRAMES);
    let normal = Normal::new(0.0, (0.5 / beta).sqrt()).expect("positive spread");
    let draw = |rng: &mut ChaCha8Rng| -> [f64; D] { std::array::from_fn(|_| normal.sample(rng)) };
    let mut bin = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    let mut ter = [Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    let tag = format!("d={D}");
    if kernel.has_binary() || !kernel.has_ternary() {
        for _ in 0..n {
            let (v, v1) = (draw(&mut rng), draw(&mut rng));
            let f = BinaryFrame::new(v, v1, sample_sphere(&mut rng))?;
            let res = [f.momentum_residual(), f.energy_residual(), f.specular_residual(), f.involution_residual()?];
            for (b, r) in bin.iter_mut().zip(res) {
                b.push(r / FRAME_TOL);
            }
        }
    }
    if kernel.has_ternary() || !kernel.has_binary() {
        for _ in 0..n {
            let (v, v1, v2) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
            let (o1, o2) = sample_sphere_pair(&mut rng);
            let f = TernaryFrame::new(v, v1, v2, o1, o2)?;
            let res =
                [f.momentum_residual(), f.energy_residual(), f.specular_residual(), f.u_tilde_residual(), f.involution_residual()?];
            for (t, r) in ter.iter_mut().zip(res) {
                t.push(r / FRAME_TOL);
            }
        }
    }
    let mut out = Vec::new();
    for (name, r) in ["momentum", "energy", "specular", "involution"].iter().zip(bin) {
        if !r.is_empty() {
            out.push(certificate(&format!("binary {name} {tag}"), r));
        }
    }
    for (name, r) in ["momentum", "energy", "specular", "u_tilde", "involution"].iter().zip(ter) {
        if !r.is_empty() {
            out.push(certificate(&format!("ternary {name} {tag}"), r));
        }
    }
    Ok(out)
}

/// Time lemma at random `(x0, u0, alpha)`: the `x0 = 0` equality case and the
/// whole-line bound, plus the half-line bound as a diagnostic (it fails for
/// `x0` ahead on the ray).
pub fn time_lemma_certificates<const D: usize>(n: usize, seed: u64) -> Result<(Vec<Certificate>, Certificate), CliError> {
    let mut rng = rng(seed, STREAM_TIME);
    let mut eq = Vec::with_capacity(n);
    let mut line = Vec::with_capacity(n);
    let mut half = Vec::with_capacity(n);
    for _ in 0..n {
        let alpha = 10f64.powf(rng.gen_range(-1.0..1.0));
        let dir: [f64; D] = sample_sphere(&mut rng);
        let u0 = dir.map(|c| c * 10f64.powf(rng.gen_range(-1.0..1.0)));
        let x0: [f64; D] = std::array::from_fn(|_| rng.gen_range(-5.0..5.0));
        let (lhs, b) = estimates::time_lemma(&[0.0; D], &u0, alpha)?;
        eq.push((lhs / b - 1.0).abs() / TIME_EQUALITY_TOL);
        let (lhs, b) = estimates::time_lemma(&x0, &u0, alpha)?;
        half.push(lhs / b);
        line.push(lhs / estimates::time_lemma_line_bound(&u0, alpha));
    }
    Ok((
        vec![
            certificate(&format!("time lemma equality d={D}"), eq),
            certificate(&format!("time lemma line bound d={D}"), line),
        ],
        certificate(&format!("time lemma half-line bound d={D}"), half),
    ))
}

/// Speeds `|v| <= 10`, uniform, for the convolution certificates.
pub fn sample_speeds(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng(seed, STREAM_SPEEDS);
    let mut s: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=10.0)).collect();
    s[0] = 0.0;
    s
}

/// Uniform points in the phase box.
pub fn sample_points<const D: usize>(grid: &PhaseGrid<f64, D>, n: usize, seed: u64) -> Vec<([f64; D], [f64; D])> {
    let mut rng = rng(seed, STREAM_POINTS);
    let (rx, rv) = (grid.rx(), grid.rv());
    (0..n)
        .map(|_| (std::array::from_fn(|_| rng.gen_range(-rx..=rx)), std::array::from_fn(|_| rng.gen_range(-rv..=rv))))
        .collect()
}

fn verify_d<const D: usize>(cfg: &RunConfig) -> Result<VerifyReport, CliError> {
    let kernel = cfg.kernel().map_err(CliError::Setup)?;
    let constants = constants_of(cfg, &kernel)?;
    let env = envelope(cfg)?;
    let mut certs = frame_certificates::<D>(&kernel, cfg.beta, cfg.verify_frames, cfg.seed)?;
    let speeds = sample_speeds(cfg.verify_speeds, cfg.seed);
    let (b, t) = estimates::verify_convolution(cfg.dim, cfg.beta, cfg.gamma2, cfg.gamma3, &speeds, constants.c_d)?;
    certs.push(b);
    certs.push(t);
    let (time, half_line) = time_lemma_certificates::<D>(cfg.verify_time_samples, cfg.seed)?;
    certs.extend(time);
    // the inputs are constant in time, so two time nodes suffice
    let grid = grid_of::<D>(cfg, &env)?.with_time_nodes(2)?;
    let ops = CollisionOperators::new(&grid, env, kernel, cfg.quadrature.clone())?.with_workers(cfg.workers)?;
    let m = PhaseDensity::scaled_envelope(&grid, env, 1.0)?;
    let points = sample_points(&grid, cfg.verify_points, cfg.seed);
    certs.extend(estimates::verify_time_average(&ops, &m, &m, &m, &points, cfg.t_max, constants.k_beta)?);
    Ok(VerifyReport { certificates: certs, diagnostics: vec![half_line] })
}

/// `verify`: certificate suite, written to `certificates.csv`.
pub fn run_verify(cfg: &RunConfig) -> Result<VerifyReport, CliError> {
    let report = match cfg.dim {
        2 => verify_d::<2>(cfg)?,
        _ => verify_d::<3>(cfg)?,
    };
    let row = |c: &Certificate, required: bool| {
        vec![
            c.name.clone(),
            c.samples.to_string(),
            output::num(c.worst_ratio),
            c.violations.to_string(),
            c.passed().to_string(),
            required.to_string(),
        ]
    };
    let rows: Vec<Vec<String>> =
        report.certificates.iter().map(|c| row(c, true)).chain(report.diagnostics.iter().map(|c| row(c, false))).collect();
    output::ensure_dir(&cfg.output_dir)?;
    output::write_csv(
        &cfg.output_dir.join("certificates.csv"),
        &cfg.hash(),
        &["name", "samples", "worst_ratio", "violations", "passed", "required"],
        &rows,
    )?;
    Ok(report)
}

fn kernels_d<const D: usize>(cfg: &RunConfig) -> Result<Vec<Vec<String>>, CliError> {
    let kernel = cfg.kernel().map_err(CliError::Setup)?;
    let mut rng = rng(cfg.seed, STREAM_FRAMES);
    let normal = Normal::new(0.0, (0.5 / cfg.beta).sqrt()).expect("positive spread");
    let draw = |rng: &mut ChaCha8Rng| -> [f64; D] { std::array::from_fn(|_| normal.sample(rng)) };
    let vec_str = |v: &[f64; D]| v.iter().map(|c| output::num(*c)).collect::<Vec<_>>().join(" ");
    let opt = |x: Option<f64>| x.map(output::num).unwrap_or_default();
    let mut rows = Vec::new();
    for i in 0..cfg.kernel_frames {
        let (v, v1) = (draw(&mut rng), draw(&mut rng));
        let f = BinaryFrame::new(v, v1, sample_sphere(&mut rng))?;
        let b = kernel.big_b2(&f.u(), &f.omega)?;
        rows.push(vec![
            "binary".into(),
            i.to_string(),
            vec_str(&f.v),
            vec_str(&f.v1),
            String::new(),
            vec_str(&f.omega),
            String::new(),
            vec_str(&f.vp),
            vec_str(&f.v1p),
            String::new(),
            opt(b),
            output::num(f.momentum_residual()),
            output::num(f.energy_residual()),
            output::num(f.specular_residual()),
            output::num(f.involution_residual()?),
        ]);
    }
    for i in 0..cfg.kernel_frames {
        let (v, v1, v2) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
        let (o1, o2) = sample_sphere_pair(&mut rng);
        let f = TernaryFrame::new(v, v1, v2, o1, o2)?;
        let b = kernel.big_b3(&f.v, &f.v1, &f.v2, &f.omega1, &f.omega2)?;
        rows.push(vec![
            "ternary".into(),
            i.to_string(),
            vec_str(&f.v),
            vec_str(&f.v1),
            vec_str(&f.v2),
            vec_str(&f.omega1),
            vec_str(&f.omega2),
            vec_str(&f.vs),
            vec_str(&f.v1s),
            vec_str(&f.v2s),
            opt(b),
            output::num(f.momentum_residual()),
            output::num(f.energy_residual()),
            output::num(f.specular_residual()),
            output::num(f.involution_residual()?),
        ]);
    }
    Ok(rows)
}

pub const FRAME_HEADER: [&str; 15] = [
    "family",
    "index",
    "v",
    "v1",
    "v2",
    "omega1",
    "omega2",
    "v_post",
    "v1_post",
    "v2_post",
    "cross_section",
    "momentum_residual",
    "energy_residual",
    "specular_residual",
    "involution_residual",
];

/// `kernels`: sampled collision frames with cross sections and residuals, written to `frames.csv`.
pub fn run_kernels(cfg: &RunConfig) -> Result<usize, CliError> {
    let rows = match cfg.dim {
        2 => kernels_d::<2>(cfg)?,
        _ => kernels_d::<3>(cfg)?,
    };
    output::ensure_dir(&cfg.output_dir)?;
    output::write_csv(&cfg.output_dir.join("frames.csv"), &cfg.hash(), &FRAME_HEADER, &rows)?;
    Ok(rows.len())
}

#[derive(Clone, Debug, Default)]
pub struct SolveOptions {
    pub override_smallness: bool,
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SolveSummary {
    pub converged: bool,
    pub iterations: usize,
    pub final_gap: f64,
    /// `gap / 2`: bound on `|f - f_exact| / M` at every node.
    pub midpoint_width: f64,
    pub eps_gap: f64,
    pub smallness: SmallnessReport<f64>,
    pub smallness_overridden: bool,
    pub k_beta: f64,
    pub lambda: f64,
    pub threshold: f64,
    pub c_out: f64,
    /// Contraction factor at `C_out`.
    pub rho: f64,
    /// Worst violation among the beginning-condition inequalities.
    pub beginning_worst: Option<f64>,
    pub max_mono_violation: f64,
    /// `max_t ||f(t)||_M` of the returned midpoint.
    pub sup_norm: f64,
    pub residual_times: Vec<f64>,
    pub residual_l1: Vec<f64>,
    pub residual_max: f64,
    pub resumed_from: Option<usize>,
}

fn initial_slice<const D: usize>(
    cfg: &RunConfig,
    grid: &PhaseGrid<f64, D>,
    env: Maxwellian<f64>,
    threshold: f64,
) -> Result<PhaseSlice<f64, D>, CliError> {
    match &cfg.initial {
        InitialData::ScaledMaxwellian { factor } => Ok(PhaseSlice::scaled_envelope(grid, env, factor * threshold)?),
        InitialData::Table { path } => {
            let rows = crate::config::read_rows(path, 2 * D + 1).map_err(CliError::Setup)?;
            let mut ratios = vec![0.0; grid.slice_len()];
            let node = |c: f64, r: f64, h: f64, n: usize| -> Option<usize> {
                let i = ((c + r) / h).round();
                (i >= 0.0 && i < n as f64 && (c - (-r + i * h)).abs() <= 1e-9 * h).then_some(i as usize)
            };
            for (row_no, row) in rows.iter().enumerate() {
                let bad = || CliError::Setup(format!("{}: row {} is not a grid node", path.display(), row_no + 1));
                let mut ix = [0usize; D];
                let mut jv = [0usize; D];
                for a in 0..D {
                    ix[a] = node(row[a], grid.rx(), grid.hx(), grid.nx()).ok_or_else(bad)?;
                    jv[a] = node(row[D + a], grid.rv(), grid.hv(), grid.nv()).ok_or_else(bad)?;
                }
                let (x, v) = (grid.x_point(PhaseGrid::<f64, D>::ravel(&ix, grid.nx())), grid.v_point(PhaseGrid::<f64, D>::ravel(&jv, grid.nv())));
                let m = env.eval(&x, &v);
                let value = row[2 * D];
                if !(value >= 0.0 && value.is_finite()) || (value > 0.0 && m == 0.0) {
                    return Err(CliError::Setup(format!(
                        "{}: row {}: value {value} has no envelope certificate",
                        path.display(),
                        row_no + 1
                    )));
                }
                let s = PhaseGrid::<f64, D>::ravel(&ix, grid.nx()) * grid.v_nodes() + PhaseGrid::<f64, D>::ravel(&jv, grid.nv());
                ratios[s] = if value == 0.0 { 0.0 } else { value / m };
            }
            Ok(PhaseSlice::from_ratios(grid, env, ratios)?)
        }
    }
}

fn grid_spec<const D: usize>(g: &PhaseGrid<f64, D>, env: &Maxwellian<f64>) -> GridSpec {
    GridSpec { dim: D, rx: g.rx(), rv: g.rv(), nx: g.nx(), nv: g.nv(), nt: g.nt(), t_max: g.t_max(), alpha: env.alpha(), beta: env.beta() }
}

fn solve_d<const D: usize>(cfg: &RunConfig, opts: &SolveOptions) -> Result<SolveSummary, CliError> {
    let hash = cfg.hash();
    let kernel = cfg.kernel().map_err(CliError::Setup)?;
    let constants = constants_of(cfg, &kernel)?;
    let env = envelope(cfg)?;
    let grid = grid_of::<D>(cfg, &env)?;
    let f0 = initial_slice(cfg, &grid, env, constants.threshold)?;
    let (l0, u0, smallness) = ks_init(&f0, &constants, opts.override_smallness)?;
    let c_out = smallness.c_out.unwrap_or(f64::NAN);
    let ops = CollisionOperators::new(&grid, env, kernel, cfg.quadrature.clone())?.with_workers(cfg.workers)?;
    let settings = KsSettings { eps_gap: cfg.eps_gap, n_max: cfg.n_max, tol_mono: cfg.tol_mono };
    let solver = KsSolver::new(&ops, f0.clone(), settings)?;
    let spec = grid_spec(&grid, &env);

    let dir = cfg.output_dir.clone();
    let ckpt_dir = dir.join("checkpoints");
    output::ensure_dir(&ckpt_dir)?;

    let start = match &opts.resume {
        None => IterationState { n: 0, l: l0, u: u0, trace: Vec::new() },
        Some(path) => {
            let (h, l, u) = output::read_checkpoint(path)?;
            if h.config_hash != hash {
                return Err(CliError::ResumeMismatch(format!("checkpoint hash {} differs from config hash {hash}", h.config_hash)));
            }
            if h.grid != spec {
                return Err(CliError::ResumeMismatch("checkpoint grid differs from the configured grid".into()));
            }
            IterationState {
                n: h.n,
                l: PhaseDensity::from_ratios(&grid, env, l)?,
                u: PhaseDensity::from_ratios(&grid, env, u)?,
                trace: h.trace.iter().map(Into::into).collect(),
            }
        }
    };
    let resumed_from = opts.resume.as_ref().map(|_| start.n);

    let clock = Instant::now();
    let mut timing: Vec<Vec<String>> = Vec::new();
    let mut io_failure = None;
    let outcome = solver.resume(start, |state| {
        let header = CheckpointHeader {
            n: state.n,
            grid: spec.clone(),
            config_hash: hash.clone(),
            storage: output::STORAGE.into(),
            values_per_field: grid.len(),
            trace: state.trace.iter().map(TraceRecord::from).collect(),
        };
        let write = || -> Result<(), CliError> {
            output::write_checkpoint(&output::checkpoint_path(&ckpt_dir, state.n), &header, state.l.ratios(), state.u.ratios())?;
            output::write_csv(&dir.join("trace.csv"), &hash, &output::TRACE_HEADER, &output::trace_rows(&state.trace))
        };
        if let Err(e) = write() {
            let msg = e.to_string();
            io_failure = Some(e);
            return Err(bintern::Error::InvalidParameter(msg));
        }
        timing.push(vec![state.n.to_string(), format!("{:.3}", clock.elapsed().as_secs_f64())]);
        Ok(())
    });
    if let Some(e) = io_failure {
        return Err(e);
    }
    let outcome = outcome?;
    output::write_csv(&dir.join("trace.csv"), &hash, &output::TRACE_HEADER, &output::trace_rows(&outcome.state.trace))?;
    output::write_csv(&dir.join("timing.csv"), &hash, &["n", "wall_time_s"], &timing)?;

    let residual = mild_residual(&ops, &f0, &outcome.f)?;
    let sup_norm = (0..grid.nt()).map(|k| outcome.f.m_norm(k)).fold(0.0, f64::max);
    let final_gap = outcome.state.gap();
    let summary = SolveSummary {
        converged: outcome.converged,
        iterations: outcome.state.n,
        final_gap,
        midpoint_width: 0.5 * final_gap,
        eps_gap: cfg.eps_gap,
        smallness_overridden: opts.override_smallness && !smallness.accepted,
        k_beta: constants.k_beta,
        lambda: constants.lambda,
        threshold: constants.threshold,
        c_out,
        rho: constants.contraction_factor(c_out),
        beginning_worst: outcome.beginning.as_ref().map(|b| b.worst().violation),
        max_mono_violation: outcome.state.trace.iter().map(|e| e.max_mono_violation).fold(0.0, f64::max),
        sup_norm,
        residual_times: (0..grid.nt()).map(|k| grid.time(k)).collect(),
        residual_l1: residual.per_time,
        residual_max: residual.max,
        resumed_from,
        smallness,
    };
    output::write_json(&dir.join("summary.json"), &hash, &summary)?;
    Ok(summary)
}

/// `solve`: bracket iteration with checkpoints, `trace.csv`, `timing.csv` and `summary.json`.
/// Non-convergence is reported through [`SolveSummary::converged`].
pub fn run_solve(cfg: &RunConfig, opts: &SolveOptions) -> Result<SolveSummary, CliError> {
    match cfg.dim {
        2 => solve_d::<2>(cfg, opts),
        _ => solve_d::<3>(cfg, opts),
    }
}
