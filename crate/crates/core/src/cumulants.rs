//! Poisson cumulants of the per-bin C term by truncated summation, and a
//! persisted interpolation table over a uniform rate grid.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::function::gamma::ln_gamma;

use crate::cash::c_term;
use crate::error::{Error, Result};
use crate::sum::KahanSum;

pub const DEFAULT_TAU: f64 = 1e-30;
/// Largest rate handled by direct summation.
pub const MAX_RATE: f64 = 1e6;
/// Environment variable naming the default table file.
pub const TABLE_ENV: &str = "CASHGOF_TABLE";

const MAGIC: &[u8; 8] = b"CSTATCUM";
const FORMAT_VERSION: u32 = 1;
const COLUMNS: u32 = 8;
const HEADER_LEN: usize = 8 + 4 + 4 + 8 * 3 + 8 + 8 + 8;
const DIGEST_LEN: usize = 32;

/// Cumulants of `C = c(N, s)` for `N ~ Poisson(s)`, and its mixed central
/// moments with `N - s`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CumulantSet {
    pub s: f64,
    /// `E C`
    pub k1: f64,
    /// `E (C - k1)^2`
    pub k2: f64,
    /// `E (C - k1)^3`
    pub k3: f64,
    /// `E (C - k1)(N - s)`
    pub k11: f64,
    /// `E (C - k1)(N - s)^2`
    pub k12: f64,
    /// `E (C - k1)^2 (N - s)`
    pub k21: f64,
    /// `E (N - s)^3`, which equals `s`.
    pub k03: f64,
}

impl CumulantSet {
    fn to_row(self) -> [f64; 8] {
        [
            self.s, self.k1, self.k2, self.k3, self.k11, self.k12, self.k21, self.k03,
        ]
    }

    fn from_row(r: [f64; 8]) -> Self {
        Self {
            s: r[0],
            k1: r[1],
            k2: r[2],
            k3: r[3],
            k11: r[4],
            k12: r[5],
            k21: r[6],
            k03: r[7],
        }
    }
}

/// Poisson probabilities `p_k` for the summation range, in increasing `k`.
fn poisson_terms(s: f64, tau: f64) -> Vec<(f64, f64)> {
    let m = s.floor();
    let log_pm = m * s.ln() - s - ln_gamma(m + 1.0);
    let pm = log_pm.exp();

    let mut below = Vec::new();
    let mut p = pm;
    let mut k = m;
    while k > 0.0 {
        p *= k / s;
        k -= 1.0;
        if p < 1e-320 {
            break;
        }
        below.push((k, p));
    }
    below.reverse();
    let mut terms = below;
    terms.push((m, pm));

    let mut mass = KahanSum::new();
    for &(_, q) in &terms {
        mass.add(q);
    }
    let ceil_s = s.ceil();
    let mut k = m;
    let mut p = pm;
    loop {
        let next_p = p * s / (k + 1.0);
        let next_k = k + 1.0;
        if k >= ceil_s {
            // Weight the next probability by the size of the third-order summands.
            let c = c_term(next_k, s);
            let scale = 1.0f64.max(c).max((next_k - s).abs());
            if next_p * scale * scale * scale <= tau * mass.value() || next_p == 0.0 {
                break;
            }
        }
        k = next_k;
        p = next_p;
        mass.add(p);
        terms.push((k, p));
    }
    terms
}

/// Cumulants at rate `s` by summation over the Poisson mass, truncated with threshold `tau`.
pub fn cumulants_at(s: f64, tau: f64) -> Result<CumulantSet> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::domain(format!("rate must be positive, got {s}")));
    }
    if s > MAX_RATE {
        return Err(Error::RateTooLarge(s));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::domain(format!(
            "truncation threshold must lie in (0, 1), got {tau}"
        )));
    }
    let terms = poisson_terms(s, tau);
    let cs: Vec<f64> = terms.iter().map(|&(k, _)| c_term(k, s)).collect();

    let mut mass = KahanSum::new();
    let mut first = KahanSum::new();
    for (&(_, p), &c) in terms.iter().zip(&cs) {
        mass.add(p);
        first.add(p * c);
    }
    let total = mass.value();
    let k1 = first.value() / total;

    let mut m2 = KahanSum::new();
    let mut m3 = KahanSum::new();
    let mut m11 = KahanSum::new();
    let mut m12 = KahanSum::new();
    let mut m21 = KahanSum::new();
    for (&(k, p), &c) in terms.iter().zip(&cs) {
        let a = c - k1;
        let b = k - s;
        m2.add(p * a * a);
        m3.add(p * a * a * a);
        m11.add(p * a * b);
        m12.add(p * a * b * b);
        m21.add(p * a * a * b);
    }
    Ok(CumulantSet {
        s,
        k1,
        k2: m2.value() / total,
        k3: m3.value() / total,
        k11: m11.value() / total,
        k12: m12.value() / total,
        k21: m21.value() / total,
        k03: s,
    })
}

/// Uniform rate grid `s_j = s_min + j * step`, `j = 0..rows`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableSpec {
    pub s_min: f64,
    pub step: f64,
    pub rows: usize,
    pub tau: f64,
}

impl Default for TableSpec {
    /// Rates `0.001, 0.002, ..., 100`.
    fn default() -> Self {
        Self {
            s_min: 1e-3,
            step: 1e-3,
            rows: 100_000,
            tau: DEFAULT_TAU,
        }
    }
}

impl TableSpec {
    #[inline]
    pub fn node(&self, j: usize) -> f64 {
        self.s_min + j as f64 * self.step
    }

    pub fn s_max(&self) -> f64 {
        self.node(self.rows.saturating_sub(1))
    }
}

/// Immutable cumulant table with its integrity digest.
#[derive(Clone, Debug, PartialEq)]
pub struct CumulantTable {
    spec: TableSpec,
    timestamp: i64,
    rows: Vec<CumulantSet>,
    digest: [u8; DIGEST_LEN],
}

/// Below this many grid steps the cumulants behave like `s ln s` and the
/// cubic interpolant loses accuracy, so lookups fall back to direct summation.
pub const SMALL_RATE_STEPS: f64 = 16.0;

/// Relative interpolation accuracy required of the table.
pub const TABLE_REL_TOL: f64 = 1e-5;

/// Compute every grid row (in parallel) and validate the interpolant.
///
/// `timestamp` is stored in the header; pass a fixed value for reproducible files.
pub fn build_table(spec: TableSpec, timestamp: i64) -> Result<CumulantTable> {
    if spec.rows == 0 || !(spec.s_min > 0.0) || !(spec.step > 0.0) || !spec.s_min.is_finite() {
        return Err(Error::domain("table grid needs rows >= 1, s_min > 0 and step > 0"));
    }
    let rows = (0..spec.rows)
        .into_par_iter()
        .map(|j| cumulants_at(spec.node(j), spec.tau))
        .collect::<Result<Vec<_>>>()?;
    let table = CumulantTable::assemble(spec, timestamp, rows);
    table.validate()?;
    Ok(table)
}

fn lagrange_weights(t: f64) -> [f64; 4] {
    [
        -t * (t - 1.0) * (t - 2.0) / 6.0,
        (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0,
        -(t + 1.0) * t * (t - 2.0) / 2.0,
        (t + 1.0) * t * (t - 1.0) / 6.0,
    ]
}

fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs()
    }
}

impl CumulantTable {
    fn assemble(spec: TableSpec, timestamp: i64, rows: Vec<CumulantSet>) -> Self {
        let mut t = Self {
            spec,
            timestamp,
            rows,
            digest: [0; DIGEST_LEN],
        };
        let body = t.body_bytes();
        t.digest = Sha256::digest(&body).into();
        t
    }

    pub fn spec(&self) -> &TableSpec {
        &self.spec
    }

    pub fn timestamp(&self) -> i64 {
        self.timestamp
    }

    pub fn rows(&self) -> &[CumulantSet] {
        &self.rows
    }

    /// Hex SHA-256 of the file body.
    pub fn checksum(&self) -> String {
        hex::encode(self.digest)
    }

    /// Cumulants at `s`: the stored row on a node, 4-point Lagrange
    /// interpolation inside the grid, direct summation below
    /// `SMALL_RATE_STEPS * step` and outside the grid.
    pub fn lookup(&self, s: f64) -> Result<CumulantSet> {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::domain(format!("rate must be positive, got {s}")));
        }
        let x = (s - self.spec.s_min) / self.spec.step;
        if x < 0.0 || x >= self.spec.rows as f64 {
            return cumulants_at(s, self.spec.tau);
        }
        let j = x.floor() as usize;
        for jj in [j, j + 1] {
            if jj < self.rows.len() && self.rows[jj].s == s {
                return Ok(self.rows[jj]);
            }
        }
        if j == 0 || j + 2 >= self.rows.len() || s < SMALL_RATE_STEPS * self.spec.step {
            return cumulants_at(s, self.spec.tau);
        }
        let t = (s - self.rows[j].s) / self.spec.step;
        let w = lagrange_weights(t);
        let r = [
            self.rows[j - 1].to_row(),
            self.rows[j].to_row(),
            self.rows[j + 1].to_row(),
            self.rows[j + 2].to_row(),
        ];
        let mut out = [0.0; 8];
        for (c, o) in out.iter_mut().enumerate().skip(1) {
            *o = w[0] * r[0][c] + w[1] * r[1][c] + w[2] * r[2][c] + w[3] * r[3][c];
        }
        out[0] = s;
        out[7] = s;
        Ok(CumulantSet::from_row(out))
    }

    /// Check the interpolant against direct summation at the midpoints of
    /// every 101st interval.
    pub fn validate(&self) -> Result<()> {
        let n = self.rows.len();
        if n < 4 {
            return Ok(());
        }
        let mut j = 1;
        while j + 2 < n {
            let s = self.rows[j].s + 0.5 * self.spec.step;
            let a = self.lookup(s)?;
            let b = cumulants_at(s, self.spec.tau)?;
            for (name, x, y) in [
                ("k1", a.k1, b.k1),
                ("k2", a.k2, b.k2),
                ("k11", a.k11, b.k11),
                ("k12", a.k12, b.k12),
            ] {
                let e = rel_err(x, y);
                if !(e < TABLE_REL_TOL) {
                    return Err(Error::TableValidation(format!(
                        "{name} at s = {s}: relative error {e:e} exceeds {TABLE_REL_TOL:e}"
                    )));
                }
            }
            j += 101;
        }
        Ok(())
    }

    fn body_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(HEADER_LEN + self.rows.len() * 64);
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        b.extend_from_slice(&COLUMNS.to_le_bytes());
        b.extend_from_slice(&self.spec.s_min.to_le_bytes());
        b.extend_from_slice(&self.spec.s_max().to_le_bytes());
        b.extend_from_slice(&self.spec.step.to_le_bytes());
        b.extend_from_slice(&(self.rows.len() as u64).to_le_bytes());
        b.extend_from_slice(&self.spec.tau.to_le_bytes());
        b.extend_from_slice(&self.timestamp.to_le_bytes());
        for r in &self.rows {
            for v in r.to_row() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = self.body_bytes();
        b.extend_from_slice(&self.digest);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + DIGEST_LEN {
            return Err(Error::CorruptTable("file too short".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        let actual: [u8; DIGEST_LEN] = Sha256::digest(body).into();
        if actual.as_slice() != digest {
            return Err(Error::CorruptTable("checksum mismatch".into()));
        }
        if &body[..8] != MAGIC {
            return Err(Error::CorruptTable("bad magic".into()));
        }
        let mut pos = 8;
        let mut take = |n: usize| {
            let s = &body[pos..pos + n];
            pos += n;
            s
        };
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
        let f64_at = |s: &[u8]| f64::from_le_bytes(s.try_into().unwrap());
        let version = u32_at(take(4));
        if version != FORMAT_VERSION {
            return Err(Error::CorruptTable(format!("unsupported format version {version}")));
        }
        let columns = u32_at(take(4));
        if columns != COLUMNS {
            return Err(Error::CorruptTable(format!(
                "expected {COLUMNS} columns, found {columns}"
            )));
        }
        let s_min = f64_at(take(8));
        let s_max = f64_at(take(8));
        let step = f64_at(take(8));
        let rows = u64::from_le_bytes(take(8).try_into().unwrap()) as usize;
        let tau = f64_at(take(8));
        let timestamp = i64::from_le_bytes(take(8).try_into().unwrap());
        if body.len() != HEADER_LEN + rows * 64 {
            return Err(Error::CorruptTable("row count does not match file length".into()));
        }
        let spec = TableSpec { s_min, step, rows, tau };
        if spec.s_max() != s_max {
            return Err(Error::CorruptTable("header grid is inconsistent".into()));
        }
        let data = &body[HEADER_LEN..];
        let mut out = Vec::with_capacity(rows);
        for (j, chunk) in data.chunks_exact(64).enumerate() {
            let mut r = [0.0; 8];
            for (c, v) in r.iter_mut().enumerate() {
                *v = f64_at(&chunk[c * 8..c * 8 + 8]);
            }
            if r[0] != spec.node(j) {
                return Err(Error::CorruptTable(format!("row {j} is off the grid")));
            }
            out.push(CumulantSet::from_row(r));
        }
        let mut digest_arr = [0u8; DIGEST_LEN];
        digest_arr.copy_from_slice(digest);
        Ok(Self {
            spec,
            timestamp,
            rows: out,
            digest: digest_arr,
        })
    }

    /// Write atomically: to a sibling temporary file, then rename.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["s", "k1", "k2", "k3", "k11", "k12", "k21", "k03"])?;
        for r in &self.rows {
            w.write_record(r.to_row().iter().map(|v| format!("{v:e}")))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Write to a temporary sibling and rename over `path`, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("`{}` is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Where per-bin cumulants come from during testing.
#[derive(Clone, Debug)]
pub struct CumulantSource {
    table: Option<Arc<CumulantTable>>,
    allow_direct: bool,
    tau: f64,
}

impl Default for CumulantSource {
    fn default() -> Self {
        Self::direct()
    }
}

impl CumulantSource {
    /// Direct summation for every rate.
    pub fn direct() -> Self {
        Self {
            table: None,
            allow_direct: true,
            tau: DEFAULT_TAU,
        }
    }

    pub fn with_table(table: Arc<CumulantTable>) -> Self {
        Self {
            tau: table.spec().tau,
            table: Some(table),
            allow_direct: true,
        }
    }

    /// Refuse to compute anything when no table is loaded.
    pub fn table_required(table: Option<Arc<CumulantTable>>) -> Self {
        Self {
            table,
            allow_direct: false,
            tau: DEFAULT_TAU,
        }
    }

    pub fn table(&self) -> Option<&Arc<CumulantTable>> {
        self.table.as_ref()
    }

    pub fn checksum(&self) -> Option<String> {
        self.table.as_ref().map(|t| t.checksum())
    }

    pub fn at(&self, s: f64) -> Result<CumulantSet> {
        match (&self.table, self.allow_direct) {
            (Some(t), _) => t.lookup(s),
            (None, true) => cumulants_at(s, self.tau),
            (None, false) => Err(Error::TableUnavailable),
        }
    }

    pub fn at_all(&self, s: &[f64]) -> Result<Vec<CumulantSet>> {
        s.iter().map(|&v| self.at(v)).collect()
    }
}
