//! Grid files and run manifests.
//!
//! A grid file is the ASCII header `GRID <rows> <cols>\n` followed by
//! `rows * cols` row-major little-endian f64 values; reading back what was
//! written is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linop::OpCounter;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Dimension(format!("{rows}x{cols} grid cannot hold {} values", data.len())));
        }
        Ok(Self { rows, cols, data })
    }
}

pub fn encode_grid(g: &Grid) -> Vec<u8> {
    let mut out = format!("GRID {} {}\n", g.rows, g.cols).into_bytes();
    out.reserve(8 * g.data.len());
    for v in &g.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_grid(bytes: &[u8]) -> Result<Grid> {
    let nl = bytes
        .iter()
        .take(64)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing GRID header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Format("header is not ASCII".into()))?;
    let mut parts = header.split(' ');
    let (tag, r, c) = (parts.next(), parts.next(), parts.next());
    if tag != Some("GRID") || parts.next().is_some() {
        return Err(Error::Format(format!("bad header {header:?}, expected \"GRID <rows> <cols>\"")));
    }
    let parse = |s: Option<&str>| s.and_then(|s| s.parse::<usize>().ok()).ok_or_else(|| Error::Format(format!("bad header {header:?}")));
    let (rows, cols) = (parse(r)?, parse(c)?);
    let body = &bytes[nl + 1..];
    let expect = rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(|| Error::Format("grid too large".into()))?;
    if body.len() != expect {
        return Err(Error::Format(format!("{rows}x{cols} grid needs {expect} payload bytes, found {}", body.len())));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
    Ok(Grid { rows, cols, data })
}

pub fn write_grid(path: &Path, g: &Grid) -> Result<()> {
    fs::write(path, encode_grid(g))?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<Grid> {
    let bytes = fs::read(path).map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    decode_grid(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Forward and adjoint application counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CallCount {
    pub forward: u64,
    pub adjoint: u64,
}

impl CallCount {
    pub fn read(c: &OpCounter) -> Self {
        Self { forward: c.forward(), adjoint: c.adjoint() }
    }

    pub fn since(self, earlier: CallCount) -> Self {
        Self { forward: self.forward - earlier.forward, adjoint: self.adjoint - earlier.adjoint }
    }
}

/// Operator applications split by phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct PhaseCounts {
    /// Measurement-independent setup (e.g. the modal basis).
    pub offline: CallCount,
    /// Registering `y`.
    pub measurement: CallCount,
    /// Everything during stepping, all paths together.
    pub sampling: CallCount,
}

/// Version of the CSV layouts written by the CLI.
pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub csv_schema: u32,
    pub config_hash: String,
    pub problem: String,
    pub method: Option<String>,
    pub engine: Option<String>,
    pub seed: u64,
    pub ensemble_size: usize,
    pub n_steps: usize,
    pub wall_time: f64,
    pub redrawn: usize,
    pub counters: PhaseCounts,
    /// Defaults for parameters the reference setup leaves unstated.
    pub assumed: serde_json::Value,
    pub files: Vec<String>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl Manifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join(MANIFEST_NAME), text + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&path).map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Creates `dir` if needed. An existing manifest whose hash differs from
/// `hash` blocks the run unless `force` is set.
pub fn prepare_output_dir(dir: &Path, hash: &str, force: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    let path = dir.join(MANIFEST_NAME);
    if !path.exists() || force {
        return Ok(());
    }
    let existing: serde_json::Value = fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or(serde_json::Value::Null);
    match existing.get("config_hash").and_then(|h| h.as_str()) {
        Some(h) if h == hash => Ok(()),
        other => Err(Error::Config(format!(
            "{} holds results for config hash {}; refusing to overwrite without --force",
            dir.display(),
            other.unwrap_or("<unreadable>")
        ))),
    }
}
