//! Output files: hashed CSV/JSON writers and iterate checkpoints.
//!
//! A checkpoint is one JSON header line followed by the raw little-endian
//! `f64` envelope ratios of `l_n` and then `u_n`, each in row-major
//! `(t, x, v)` order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use bintern::ks_solver::TraceEntry;
use serde::{Deserialize, Serialize};

use crate::CliError;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Pretty JSON with the config hash as the first field.
pub fn write_json<S: Serialize>(path: &Path, hash: &str, body: &S) -> Result<(), CliError> {
    let mut value = serde_json::to_value(body).map_err(|e| io_err(path, e))?;
    let mut obj = serde_json::Map::new();
    obj.insert("config_hash".into(), hash.into());
    if let serde_json::Value::Object(m) = &mut value {
        obj.append(m);
    } else {
        obj.insert("value".into(), value);
    }
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(obj)).map_err(|e| io_err(path, e))?;
    write_text(path, &(text + "\n"))
}

/// CSV with a leading `# config_hash=...` line.
pub fn write_csv(path: &Path, hash: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut out = format!("# config_hash={hash}\n");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| io_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| io_err(path, e))?;
    out.push_str(&String::from_utf8_lossy(&bytes));
    write_text(path, &out)
}

/// Shortest round-trip representation, so CSV values are exact.
pub fn num(x: f64) -> String {
    format!("{x:e}")
}

pub fn trace_rows(trace: &[TraceEntry]) -> Vec<Vec<String>> {
    trace.iter().map(|e| vec![e.n.to_string(), num(e.gap), num(e.max_mono_violation), num(e.residual_l1)]).collect()
}

pub const TRACE_HEADER: [&str; 4] = ["n", "gap", "max_mono_violation", "residual_L1"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    pub rx: f64,
    pub rv: f64,
    pub nx: usize,
    pub nv: usize,
    pub nt: usize,
    pub t_max: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub n: usize,
    pub grid: GridSpec,
    pub config_hash: String,
    pub storage: String,
    pub values_per_field: usize,
    pub trace: Vec<TraceRecord>,
}

/// Serializable copy of a trace entry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub n: usize,
    pub gap: f64,
    pub max_mono_violation: f64,
    pub residual_l1: f64,
    pub clamped: usize,
}

impl From<&TraceEntry> for TraceRecord {
    fn from(e: &TraceEntry) -> Self {
        Self { n: e.n, gap: e.gap, max_mono_violation: e.max_mono_violation, residual_l1: e.residual_l1, clamped: e.clamped }
    }
}

impl From<&TraceRecord> for TraceEntry {
    fn from(e: &TraceRecord) -> Self {
        Self { n: e.n, gap: e.gap, max_mono_violation: e.max_mono_violation, residual_l1: e.residual_l1, clamped: e.clamped }
    }
}

pub const STORAGE: &str = "envelope ratio f/M, f64 little-endian, l then u, row-major (t, x, v)";

pub fn checkpoint_path(dir: &Path, n: usize) -> PathBuf {
    dir.join(format!("iter_{n:04}.ckpt"))
}

pub fn write_checkpoint(path: &Path, header: &CheckpointHeader, l: &[f64], u: &[f64]) -> Result<(), CliError> {
    let mut buf = serde_json::to_vec(header).map_err(|e| io_err(path, e))?;
    buf.push(b'\n');
    buf.reserve(16 * l.len());
    for x in l.iter().chain(u) {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(&buf).map_err(|e| io_err(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<f64>, Vec<f64>), CliError> {
    let f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(f);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| io_err(path, e))?;
    let header: CheckpointHeader = serde_json::from_str(&line).map_err(|e| io_err(path, format!("bad header: {e}")))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| io_err(path, e))?;
    let n = header.values_per_field;
    if bytes.len() != 16 * n {
        return Err(io_err(path, format!("expected {} data bytes, found {}", 16 * n, bytes.len())));
    }
    let vals: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    let (l, u) = vals.split_at(n);
    Ok((header, l.to_vec(), u.to_vec()))
}
