//! Plain-text `key = value` run configuration.
//!
//! One key per line, `#` starts a comment, sections are dotted prefixes
//! (`grid.nx = 16`). Every key has a default; unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use bintern::cross_sections::{AngularTable, AngularTable2, BinaryAngular, KernelConfig, TernaryAngular};
use bintern::estimates::CdMode;
use bintern::operators::{Backend, QuadratureSpec};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Itemized list of configuration problems.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} configuration error(s):", self.0.len())?;
        for e in &self.0 {
            writeln!(f, "  - {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum BinarySpec {
    HardSphere,
    Maxwell,
    Zero,
    Constant(f64),
    Table(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum TernarySpec {
    Derived,
    Maxwell,
    Zero,
    Constant(f64),
    Table(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum InitialData {
    /// `factor * threshold * M`
    ScaledMaxwellian { factor: f64 },
    /// CSV rows `x.., v.., value` at grid nodes.
    Table { path: PathBuf },
}

/// Fully validated run configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub dim: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma2: f64,
    pub b2: BinarySpec,
    pub gamma3: f64,
    pub b3: TernarySpec,
    pub nx: usize,
    pub nv: usize,
    pub nt: usize,
    pub t_max: f64,
    /// Box half-widths; fitted to the truncation tolerance when absent.
    pub rx: Option<f64>,
    pub rv: Option<f64>,
    pub truncation_tol: f64,
    pub quadrature: QuadratureSpec,
    pub initial: InitialData,
    pub n_max: usize,
    pub eps_gap: f64,
    pub tol_mono: f64,
    pub c_d_mode: CdMode,
    pub verify_frames: usize,
    pub verify_speeds: usize,
    pub verify_points: usize,
    pub verify_time_samples: usize,
    pub kernel_frames: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub workers: usize,
    /// Canonical `key = value` text, the input of [`RunConfig::hash`].
    canonical: BTreeMap<String, String>,
    base: PathBuf,
}

const DEFAULTS: &[(&str, &str)] = &[
    ("dim", "2"),
    ("alpha", "1"),
    ("beta", "1"),
    ("kernel.gamma2", "1"),
    ("kernel.b2", "hard_sphere"),
    ("kernel.gamma3", "1"),
    ("kernel.b3", "derived"),
    ("grid.nx", "16"),
    ("grid.nv", "16"),
    ("grid.nt", "64"),
    ("grid.t_max", "4"),
    ("grid.rx", "auto"),
    ("grid.rv", "auto"),
    ("grid.truncation_tol", "1e-8"),
    ("quadrature.backend", "monte_carlo"),
    ("quadrature.n_mc", "64"),
    ("quadrature.n_ang", "8"),
    ("quadrature.n_v", "4"),
    ("quadrature.error_estimate", "false"),
    ("initial.preset", "scaled_maxwellian"),
    ("initial.factor", "0.5"),
    ("initial.path", ""),
    ("stop.n_max", "50"),
    ("stop.eps_gap", "1e-6"),
    ("tolerances.mono", "1e-8"),
    ("constants.c_d_mode", "shipped"),
    ("verify.frames", "10000"),
    ("verify.speeds", "1000"),
    ("verify.points", "200"),
    ("verify.time_samples", "1000"),
    ("kernels.frames", "200"),
    ("output.dir", "out"),
    ("seed", "0"),
    ("workers", "1"),
];

/// Keys that do not change results and are left out of the hash.
const UNHASHED: &[&str] = &["output.dir"];

/// Splits `key = value` lines; reports malformed and unknown lines.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, ConfigErrors> {
    let mut out = BTreeMap::new();
    let mut errors = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            errors.push(format!("line {}: expected `key = value`", no + 1));
            continue;
        };
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if !DEFAULTS.iter().any(|(d, _)| *d == k) {
            errors.push(format!("line {}: unknown key `{k}`", no + 1));
        } else if out.insert(k.clone(), v).is_some() {
            errors.push(format!("line {}: duplicate key `{k}`", no + 1));
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(ConfigErrors(errors))
    }
}

struct Reader<'a> {
    values: &'a BTreeMap<String, String>,
    errors: Vec<String>,
}

impl Reader<'_> {
    fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Option<T> {
        let raw = self.raw(key).to_string();
        match raw.parse() {
            Ok(v) => Some(v),
            Err(_) => {
                self.errors.push(format!("{key}: cannot parse `{raw}`"));
                None
            }
        }
    }

    fn float(&mut self, key: &str, ok: impl Fn(f64) -> bool, range: &str) -> f64 {
        match self.parse::<f64>(key) {
            Some(v) if v.is_finite() && ok(v) => v,
            Some(v) => {
                self.errors.push(format!("{key} = {v} outside {range}"));
                f64::NAN
            }
            None => f64::NAN,
        }
    }

    fn count(&mut self, key: &str, min: usize) -> usize {
        match self.parse::<usize>(key) {
            Some(v) if v >= min => v,
            Some(v) => {
                self.errors.push(format!("{key} = {v} must be at least {min}"));
                min
            }
            None => min,
        }
    }

    fn optional_float(&mut self, key: &str) -> Option<f64> {
        if self.raw(key) == "auto" {
            return None;
        }
        Some(self.float(key, |v| v > 0.0, "(0, inf)"))
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Reads and validates a config file; relative paths resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self, ConfigErrors> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigErrors(vec![format!("{}: {e}", path.display())]))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_str_in(&text, &base)
    }

    /// Parses config text with relative paths resolved against `base`.
    pub fn from_str_in(text: &str, base: &Path) -> Result<Self, ConfigErrors> {
        let given = parse_pairs(text)?;
        Self::from_pairs(given, base)
    }

    pub fn from_pairs(given: BTreeMap<String, String>, base: &Path) -> Result<Self, ConfigErrors> {
        let mut values: BTreeMap<String, String> = DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        values.extend(given);
        let mut r = Reader { values: &values, errors: Vec::new() };

        let dim = r.count("dim", 2);
        if !(2..=3).contains(&dim) {
            r.errors.push(format!("dim = {dim} must be 2 or 3"));
        }
        let df = dim as f64;
        let alpha = r.float("alpha", |v| v > 0.0, "(0, inf)");
        let beta = r.float("beta", |v| v > 0.0, "(0, inf)");
        let gamma2 = r.float("kernel.gamma2", |v| v > 1.0 - df && v <= 1.0, &format!("({}, 1]", 1.0 - df));
        let gamma3 = r.float("kernel.gamma3", |v| v > 1.0 - 2.0 * df && v <= 1.0, &format!("({}, 1]", 1.0 - 2.0 * df));
        let b2 = match r.raw("kernel.b2").to_string().as_str() {
            "hard_sphere" => BinarySpec::HardSphere,
            "maxwell" => BinarySpec::Maxwell,
            "zero" => BinarySpec::Zero,
            s if s.starts_with("constant:") => match s["constant:".len()..].parse::<f64>() {
                Ok(c) if c.is_finite() && c >= 0.0 => BinarySpec::Constant(c),
                _ => {
                    r.errors.push(format!("kernel.b2: bad constant in `{s}`"));
                    BinarySpec::Zero
                }
            },
            s if s.starts_with("table:") => BinarySpec::Table(resolve(base, &s["table:".len()..])),
            s => {
                r.errors.push(format!("kernel.b2: unknown angular density `{s}`"));
                BinarySpec::Zero
            }
        };
        let b3 = match r.raw("kernel.b3").to_string().as_str() {
            "derived" => TernarySpec::Derived,
            "maxwell" => TernarySpec::Maxwell,
            "zero" => TernarySpec::Zero,
            s if s.starts_with("constant:") => match s["constant:".len()..].parse::<f64>() {
                Ok(c) if c.is_finite() && c >= 0.0 => TernarySpec::Constant(c),
                _ => {
                    r.errors.push(format!("kernel.b3: bad constant in `{s}`"));
                    TernarySpec::Zero
                }
            },
            s if s.starts_with("table:") => TernarySpec::Table(resolve(base, &s["table:".len()..])),
            s => {
                r.errors.push(format!("kernel.b3: unknown angular density `{s}`"));
                TernarySpec::Zero
            }
        };
        let b2_zero = matches!(b2, BinarySpec::Zero | BinarySpec::Constant(0.0));
        let b3_zero = matches!(b3, TernarySpec::Zero | TernarySpec::Constant(0.0));
        if b2_zero && b3_zero {
            r.errors.push("kernel: at least one of b2, b3 must be nonzero".into());
        }

        let nx = r.count("grid.nx", 2);
        let nv = r.count("grid.nv", 2);
        let nt = r.count("grid.nt", 2);
        let t_max = r.float("grid.t_max", |v| v > 0.0, "(0, inf)");
        let rx = r.optional_float("grid.rx");
        let rv = r.optional_float("grid.rv");
        let truncation_tol = r.float("grid.truncation_tol", |v| v > 0.0 && v < 1.0, "(0, 1)");

        let backend = match r.raw("quadrature.backend") {
            "monte_carlo" => Backend::MonteCarlo,
            "deterministic" => Backend::Deterministic,
            s => {
                r.errors.push(format!("quadrature.backend: unknown backend `{s}`"));
                Backend::MonteCarlo
            }
        };
        let seed = r.parse::<u64>("seed").unwrap_or(0);
        let quadrature = QuadratureSpec {
            backend,
            n_ang: r.count("quadrature.n_ang", 1),
            n_v: r.count("quadrature.n_v", 1),
            n_mc: r.count("quadrature.n_mc", 1),
            seed,
            error_estimate: r.parse::<bool>("quadrature.error_estimate").unwrap_or(false),
        };
        if (2..=3).contains(&dim) {
            if let Err(e) = quadrature.validate(dim) {
                r.errors.push(format!("quadrature: {e}"));
            }
        }

        let initial = match r.raw("initial.preset") {
            "scaled_maxwellian" => InitialData::ScaledMaxwellian {
                factor: r.float("initial.factor", |v| (0.0..1.0).contains(&v), "[0, 1)"),
            },
            "table" => {
                let p = r.raw("initial.path").to_string();
                if p.is_empty() {
                    r.errors.push("initial.path is required for the table preset".into());
                }
                let path = resolve(base, &p);
                if !p.is_empty() && !path.is_file() {
                    r.errors.push(format!("initial.path: {} does not exist", path.display()));
                }
                InitialData::Table { path }
            }
            s => {
                r.errors.push(format!("initial.preset: unknown preset `{s}`"));
                InitialData::ScaledMaxwellian { factor: 0.0 }
            }
        };
        for table in [
            if let BinarySpec::Table(p) = &b2 { Some(p.clone()) } else { None },
            if let TernarySpec::Table(p) = &b3 { Some(p.clone()) } else { None },
        ]
        .into_iter()
        .flatten()
        {
            if !table.is_file() {
                r.errors.push(format!("kernel table {} does not exist", table.display()));
            }
        }

        let n_max = r.count("stop.n_max", 1);
        let eps_gap = r.float("stop.eps_gap", |v| v >= 0.0, "[0, inf)");
        let tol_mono = r.float("tolerances.mono", |v| v >= 0.0, "[0, inf)");
        let c_d_mode = match r.raw("constants.c_d_mode") {
            "shipped" => CdMode::Shipped,
            "normalized" => CdMode::Normalized,
            s => {
                r.errors.push(format!("constants.c_d_mode: unknown mode `{s}`"));
                CdMode::Shipped
            }
        };
        let verify_frames = r.count("verify.frames", 1);
        let verify_speeds = r.count("verify.speeds", 1);
        let verify_points = r.count("verify.points", 1);
        let verify_time_samples = r.count("verify.time_samples", 1);
        let kernel_frames = r.count("kernels.frames", 1);
        let output_dir = resolve(base, r.raw("output.dir"));
        let workers = r.count("workers", 1);

        if !r.errors.is_empty() {
            return Err(ConfigErrors(r.errors));
        }
        Ok(Self {
            dim,
            alpha,
            beta,
            gamma2,
            b2,
            gamma3,
            b3,
            nx,
            nv,
            nt,
            t_max,
            rx,
            rv,
            truncation_tol,
            quadrature,
            initial,
            n_max,
            eps_gap,
            tol_mono,
            c_d_mode,
            verify_frames,
            verify_speeds,
            verify_points,
            verify_time_samples,
            kernel_frames,
            output_dir,
            seed,
            workers,
            canonical: values,
            base: base.to_path_buf(),
        })
    }

    /// Applies command-line overrides and revalidates.
    pub fn with_overrides(self, seed: Option<u64>, workers: Option<usize>) -> Result<Self, ConfigErrors> {
        let mut values = self.canonical.clone();
        if let Some(s) = seed {
            values.insert("seed".into(), s.to_string());
        }
        if let Some(w) = workers {
            values.insert("workers".into(), w.to_string());
        }
        let out = Self::from_pairs(values, &self.base)?;
        Ok(out)
    }

    /// SHA-256 of the canonical key/value text, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.canonical {
            if UNHASHED.contains(&k.as_str()) {
                continue;
            }
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        for table in [
            if let BinarySpec::Table(p) = &self.b2 { Some(p) } else { None },
            if let TernarySpec::Table(p) = &self.b3 { Some(p) } else { None },
            if let InitialData::Table { path } = &self.initial { Some(path) } else { None },
        ]
        .into_iter()
        .flatten()
        {
            if let Ok(bytes) = std::fs::read(table) {
                h.update(&bytes);
            }
        }
        hex::encode(h.finalize())
    }

    /// Canonical text with every default filled in.
    pub fn canonical_text(&self) -> String {
        self.canonical.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn kernel(&self) -> Result<KernelConfig<f64>, String> {
        let b2 = match &self.b2 {
            BinarySpec::HardSphere => BinaryAngular::HardSphere,
            BinarySpec::Maxwell => BinaryAngular::maxwell(self.dim),
            BinarySpec::Zero => BinaryAngular::Zero,
            BinarySpec::Constant(c) => BinaryAngular::Constant(*c),
            BinarySpec::Table(p) => {
                let rows = read_rows(p, 2)?;
                let (z, v) = rows.iter().map(|r| (r[0], r[1])).unzip();
                BinaryAngular::Table(AngularTable::new(z, v).map_err(|e| format!("{}: {e}", p.display()))?)
            }
        };
        let b3 = match &self.b3 {
            TernarySpec::Derived => TernaryAngular::Derived,
            TernarySpec::Maxwell => TernaryAngular::maxwell(self.dim),
            TernarySpec::Zero => TernaryAngular::Zero,
            TernarySpec::Constant(c) => TernaryAngular::Constant(*c),
            TernarySpec::Table(p) => TernaryAngular::Table(read_table2(p)?),
        };
        KernelConfig::new(self.dim, self.gamma2, b2, self.gamma3, b3).map_err(|e| e.to_string())
    }
}

/// Numeric CSV rows with a header line and exactly `width` columns.
pub fn read_rows(path: &Path, width: usize) -> Result<Vec<Vec<f64>>, String> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| format!("{}: {e}", path.display()))?;
        if rec.len() != width {
            return Err(format!("{}: row {} has {} columns, expected {width}", path.display(), i + 1, rec.len()));
        }
        let row: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        rows.push(row.map_err(|_| format!("{}: row {} is not numeric", path.display(), i + 1))?);
    }
    Ok(rows)
}

/// Ternary table from `z, w, value` rows covering a full tensor grid.
fn read_table2(path: &Path) -> Result<AngularTable2<f64>, String> {
    let rows = read_rows(path, 3)?;
    let mut z: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let mut w: Vec<f64> = rows.iter().map(|r| r[1]).collect();
    for axis in [&mut z, &mut w] {
        axis.sort_by(f64::total_cmp);
        axis.dedup();
    }
    let mut values = vec![f64::NAN; z.len() * w.len()];
    for r in &rows {
        let iz = z.iter().position(|a| *a == r[0]).unwrap_or(0);
        let iw = w.iter().position(|a| *a == r[1]).unwrap_or(0);
        values[iz * w.len() + iw] = r[2];
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(format!("{}: table does not cover a full (z, w) grid", path.display()));
    }
    AngularTable2::new(z, w, values).map_err(|e| format!("{}: {e}", path.display()))
}
