//! Persistence: binary environment container, JSON sidecars and manifests,
//! and plot-ready CSV maps and reports.
//!
//! Container layout (little endian):
//!
//! ```text
//! magic "LOCRENV\0" | u32 version | u64 header length | header JSON
//! | per BS, per grid point: u32 path count, then (re, im, delay) f64 triples
//! | SHA-256 of everything before it
//! ```

use crate::channel::PathSet;
use crate::env2d::{EnvConfig, EnvironmentMap, GridGeometry, OutageCapacityMap};
use crate::error::{Error, Result};
use crate::locfim::LocalizationModel;
use crate::rateselect::EvaluationReport;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub const CONTAINER_MAGIC: &[u8; 8] = b"LOCRENV\0";
pub const CONTAINER_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContainerHeader {
    config: EnvConfig,
    grid: GridGeometry,
    bs_count: usize,
    config_hash: String,
    field_nugget: f64,
    field_exact: bool,
}

/// Serializes an environment into the container format.
pub fn encode_environment(env: &EnvironmentMap) -> Result<Vec<u8>> {
    let header = ContainerHeader {
        config: env.config.clone(),
        grid: env.grid.clone(),
        bs_count: env.bs_count(),
        config_hash: env.config_hash.clone(),
        field_nugget: env.field_nugget,
        field_exact: env.field_exact,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Corrupt(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for per_bs in &env.paths {
        for p in per_bs {
            out.extend_from_slice(&(p.len() as u32).to_le_bytes());
            for (a, d) in p.amplitudes().iter().zip(p.delays()) {
                out.extend_from_slice(&a.re.to_le_bytes());
                out.extend_from_slice(&a.im.to_le_bytes());
                out.extend_from_slice(&d.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Corrupt(format!("truncated container at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Parses and verifies a container.
pub fn decode_environment(bytes: &[u8]) -> Result<EnvironmentMap> {
    if bytes.len() < CONTAINER_MAGIC.len() + 12 + DIGEST_LEN || &bytes[..8] != CONTAINER_MAGIC {
        return Err(Error::Corrupt("not an environment container".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Corrupt("checksum mismatch".into()));
    }
    let mut c = Cursor {
        bytes: body,
        pos: 8,
    };
    let version = c.u32()?;
    if version != CONTAINER_VERSION {
        return Err(Error::Corrupt(format!(
            "unsupported container version {version}"
        )));
    }
    let len =
        usize::try_from(c.u64()?).map_err(|_| Error::Corrupt("header length overflow".into()))?;
    let header: ContainerHeader =
        serde_json::from_slice(c.take(len)?).map_err(|e| Error::Corrupt(format!("header: {e}")))?;
    if header.config.grid().ok().as_ref() != Some(&header.grid) {
        return Err(Error::Corrupt(
            "grid does not match the configuration".into(),
        ));
    }
    let n = header.grid.len();
    let mut paths = Vec::with_capacity(header.bs_count);
    for _ in 0..header.bs_count {
        let mut per_bs = Vec::with_capacity(n);
        for _ in 0..n {
            let k = c.u32()? as usize;
            let mut amps = Vec::with_capacity(k.min(1 << 16));
            let mut delays = Vec::with_capacity(k.min(1 << 16));
            for _ in 0..k {
                amps.push(Complex64::new(c.f64()?, c.f64()?));
                delays.push(c.f64()?);
            }
            per_bs.push(PathSet::new(amps, delays).map_err(|e| Error::Corrupt(e.to_string()))?);
        }
        paths.push(per_bs);
    }
    if c.pos != body.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes",
            body.len() - c.pos
        )));
    }
    Ok(EnvironmentMap {
        config: header.config,
        grid: header.grid,
        paths,
        config_hash: header.config_hash,
        field_nugget: header.field_nugget,
        field_exact: header.field_exact,
    })
}

pub fn write_environment(path: &Path, env: &EnvironmentMap) -> Result<String> {
    let bytes = encode_environment(env)?;
    fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_environment(path: &Path) -> Result<EnvironmentMap> {
    decode_environment(&fs::read(path)?)
}

/// Human-readable companion of a container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSidecar {
    pub format_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub container_sha256: String,
    pub grid: GridGeometry,
    pub bs_count: usize,
    pub field_nugget: f64,
    pub field_exact: bool,
    pub config: EnvConfig,
}

impl EnvironmentSidecar {
    pub fn new(env: &EnvironmentMap, container_sha256: String) -> Self {
        Self {
            format_version: CONTAINER_VERSION,
            seed: env.config.seed,
            config_hash: env.config_hash.clone(),
            container_sha256,
            grid: env.grid.clone(),
            bs_count: env.bs_count(),
            field_nugget: env.field_nugget,
            field_exact: env.field_exact,
            config: env.config.clone(),
        }
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<String> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Corrupt(e.to_string()))?;
    bytes.push(b'\n');
    fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))
}

/// Capacity map as CSV `x,y,c_eps` over the padded grid, raster order.
pub fn capacity_csv(map: &OutageCapacityMap, seed: u64) -> String {
    let mut s = format!(
        "# eps={},samples={},seed={}\nx,y,c_eps\n",
        map.eps, map.sample_count, seed
    );
    for (i, v) in map.values.iter().enumerate() {
        let (x, y) = map.grid.point_at(i);
        let _ = writeln!(s, "{x},{y},{v}");
    }
    s
}

/// Key/value pairs of a `# k=v,k=v` header comment.
fn parse_comment(line: &str) -> Result<BTreeMap<String, String>> {
    let body = line
        .strip_prefix("# ")
        .ok_or_else(|| Error::Corrupt(format!("missing header comment: {line}")))?;
    body.split(',')
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Corrupt(format!("malformed header field: {kv}")))
        })
        .collect()
}

/// Header comment and numeric rows of a CSV artifact with the given column line.
fn parse_table(text: &str, columns: &str) -> Result<(BTreeMap<String, String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines();
    let header = parse_comment(lines.next().unwrap_or_default())?;
    if lines.next() != Some(columns) {
        return Err(Error::Corrupt(format!("expected column line {columns}")));
    }
    let width = columns.split(',').count();
    let rows = lines
        .map(|l| {
            let f: Vec<f64> = l
                .split(',')
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| Error::Corrupt(format!("{l}: {e}")))
                })
                .collect::<Result<_>>()?;
            if f.len() == width {
                Ok(f)
            } else {
                Err(Error::Corrupt(format!("expected {width} fields: {l}")))
            }
        })
        .collect::<Result<_>>()?;
    Ok((header, rows))
}

fn header_value<T: std::str::FromStr>(header: &BTreeMap<String, String>, key: &str) -> Result<T> {
    header
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Corrupt(format!("header field {key} missing or malformed")))
}

/// Parses a capacity CSV back into its values, in file order.
pub fn parse_capacity_csv(text: &str) -> Result<Vec<(f64, f64, f64)>> {
    let (_, rows) = parse_table(text, "x,y,c_eps")?;
    Ok(rows.into_iter().map(|r| (r[0], r[1], r[2])).collect())
}

/// Rebuilds a capacity map written by [`capacity_csv`] on `grid`.
pub fn capacity_map_from_csv(text: &str, grid: &GridGeometry) -> Result<OutageCapacityMap> {
    let (header, rows) = parse_table(text, "x,y,c_eps")?;
    if rows.len() != grid.len() {
        return Err(Error::Corrupt(format!(
            "{} capacity rows for {} grid points",
            rows.len(),
            grid.len()
        )));
    }
    for (i, r) in rows.iter().enumerate() {
        let (x, y) = grid.point_at(i);
        if !(coord_matches(r[0], x) && coord_matches(r[1], y)) {
            return Err(Error::Corrupt(format!(
                "row {i} at ({}, {}) does not match grid point ({x}, {y})",
                r[0], r[1]
            )));
        }
    }
    let values = rows.into_iter().map(|r| r[2]).collect();
    OutageCapacityMap::new(
        grid.clone(),
        values,
        header_value(&header, "eps")?,
        header_value(&header, "samples")?,
    )
    .map_err(|e| Error::Corrupt(e.to_string()))
}

fn coord_matches(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * b.abs().max(1.0)
}

/// PEB map as CSV `x,y,peb,s11,s12,s22` over points with a covariance.
pub fn peb_csv(model: &LocalizationModel, draws: usize, seed: u64) -> String {
    let mut s = format!(
        "# kind={},draws={},seed={}\nx,y,peb,s11,s12,s22\n",
        kind_name(model),
        draws,
        seed
    );
    for (i, c) in model.cov.iter().enumerate() {
        if let Some(c) = c {
            let (x, y) = model.grid.point_at(i);
            let _ = writeln!(s, "{x},{y},{},{},{},{}", c.peb(), c.s11, c.s12, c.s22);
        }
    }
    s
}

fn kind_name(model: &LocalizationModel) -> &'static str {
    match model.kind {
        crate::locfim::LocalizationKind::Constant => "constant",
        crate::locfim::LocalizationKind::Crlb => "crlb",
    }
}

/// Evaluation report as CSV `x,y,meta,throughput`, one row per point.
pub fn report_csv(report: &EvaluationReport) -> String {
    let mut s = format!(
        "# scheme={},parameter={},delta={},seed={}\nx,y,meta,throughput\n",
        report.scheme.family(),
        report.scheme.parameter(),
        report.delta,
        report.seed
    );
    for p in &report.points {
        let _ = writeln!(s, "{},{},{},{}", p.x, p.y, p.meta, p.throughput);
    }
    s
}

/// One row of a report CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportRow {
    pub x: f64,
    pub y: f64,
    pub meta: f64,
    pub throughput: f64,
}

/// Header fields and rows of a CSV written by [`report_csv`].
pub fn parse_report_csv(text: &str) -> Result<(BTreeMap<String, String>, Vec<ReportRow>)> {
    let (header, rows) = parse_table(text, "x,y,meta,throughput")?;
    for key in ["scheme", "parameter", "delta", "seed"] {
        if !header.contains_key(key) {
            return Err(Error::Corrupt(format!("report header lacks {key}")));
        }
    }
    let rows = rows
        .into_iter()
        .map(|r| ReportRow {
            x: r[0],
            y: r[1],
            meta: r[2],
            throughput: r[3],
        })
        .collect();
    Ok((header, rows))
}

/// Writes `text` and returns its SHA-256.
pub fn write_text(path: &Path, text: &str) -> Result<String> {
    fs::write(path, text)?;
    Ok(sha256_hex(text.as_bytes()))
}

/// Reproducibility record for one CLI invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub seed: u64,
    pub threads: Option<usize>,
    pub config: serde_json::Value,
    /// Wall-clock seconds per stage.
    pub runtimes: BTreeMap<String, f64>,
    /// File name to SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            command: command.into(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            seed,
            threads: None,
            config,
            runtimes: BTreeMap::new(),
            outputs: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    /// Checks every recorded digest against the files in `dir`.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for (name, digest) in &self.outputs {
            let got = file_sha256(&dir.join(name))?;
            if &got != digest {
                return Err(Error::Corrupt(format!(
                    "{name}: digest {got} does not match manifest {digest}"
                )));
            }
        }
        Ok(())
    }
}
