//! Binned count data: channel grid, exposure and optional background.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observed counts `N_i` on a strictly increasing channel grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinnedDataset {
    counts: Vec<u64>,
    edges: Vec<f64>,
    exposure: f64,
    background: Option<Vec<f64>>,
}

impl BinnedDataset {
    pub fn new(counts: Vec<u64>, edges: Vec<f64>, exposure: f64, background: Option<Vec<f64>>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::domain("dataset must contain at least one bin"));
        }
        if edges.len() != counts.len() + 1 {
            return Err(Error::LengthMismatch {
                expected: counts.len() + 1,
                found: edges.len(),
            });
        }
        if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::domain("channel edges must be finite and strictly increasing"));
        }
        if !(exposure.is_finite() && exposure > 0.0) {
            return Err(Error::domain(format!("exposure must be positive, got {exposure}")));
        }
        if let Some(b) = &background {
            if b.len() != counts.len() {
                return Err(Error::LengthMismatch {
                    expected: counts.len(),
                    found: b.len(),
                });
            }
            if b.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::domain("background must be finite and non-negative"));
            }
        }
        Ok(Self {
            counts,
            edges,
            exposure,
            background,
        })
    }

    /// Dataset on the uniform grid `1 + i/n`, `i = 0..=n`.
    pub fn on_unit_grid(counts: Vec<u64>) -> Result<Self> {
        let n = counts.len();
        Self::new(counts, unit_grid_edges(n), 1.0, None)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn exposure(&self) -> f64 {
        self.exposure
    }

    pub fn background(&self) -> Option<&[f64]> {
        self.background.as_deref()
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total_counts(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn lower_edges(&self) -> &[f64] {
        &self.edges[..self.len()]
    }

    pub fn upper_edges(&self) -> &[f64] {
        &self.edges[1..]
    }

    pub fn midpoints(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// Replace the counts, keeping the grid.
    pub fn with_counts(&self, counts: Vec<u64>) -> Result<Self> {
        Self::new(counts, self.edges.clone(), self.exposure, self.background.clone())
    }

    pub fn with_exposure(mut self, exposure: f64) -> Result<Self> {
        if !(exposure.is_finite() && exposure > 0.0) {
            return Err(Error::domain(format!("exposure must be positive, got {exposure}")));
        }
        self.exposure = exposure;
        Ok(self)
    }

    pub fn with_background(self, background: Option<Vec<f64>>) -> Result<Self> {
        Self::new(self.counts, self.edges, self.exposure, background)
    }

    /// Read the CSV layout `channel,lo,hi,count[,background]`.
    ///
    /// An optional first line `# exposure=<T>` sets the exposure.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        Self::from_reader(std::io::BufReader::new(file))
    }

    pub fn from_reader<R: BufRead>(mut reader: R) -> Result<Self> {
        let mut text = String::new();
        reader.read_to_string(&mut text)?;
        let mut exposure = 1.0;
        let mut body = text.as_str();
        if let Some(first) = body.lines().next() {
            if let Some(rest) = first.trim().strip_prefix('#') {
                let rest = rest.trim();
                let value = rest
                    .strip_prefix("exposure")
                    .map(|v| v.trim_start_matches([' ', '=', ':']).trim())
                    .ok_or_else(|| Error::invalid(format!("unrecognised header comment `{first}`")))?;
                exposure = value
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad exposure `{value}`")))?;
                body = &body[first.len()..];
                body = body.trim_start_matches(['\r', '\n']);
            }
        }

        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(body.as_bytes());
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
        let has_background = match headers.as_slice() {
            [a, b, c, d] if a == "channel" && b == "lo" && c == "hi" && d == "count" => false,
            [a, b, c, d, e] if a == "channel" && b == "lo" && c == "hi" && d == "count" && e == "background" => true,
            _ => {
                return Err(Error::invalid(format!(
                    "dataset header must be `channel,lo,hi,count[,background]`, got `{}`",
                    headers.join(",")
                )))
            }
        };

        let mut counts = Vec::new();
        let mut edges = Vec::new();
        let mut background = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            let field = |k: usize| -> Result<&str> {
                record
                    .get(k)
                    .ok_or_else(|| Error::invalid(format!("row {}: missing column {k}", row + 1)))
            };
            let parse_f = |k: usize| -> Result<f64> {
                let s = field(k)?;
                s.parse()
                    .map_err(|_| Error::invalid(format!("row {}: bad number `{s}`", row + 1)))
            };
            let channel: usize = field(0)?
                .parse()
                .map_err(|_| Error::invalid(format!("row {}: bad channel index", row + 1)))?;
            if channel != row + 1 && channel != row {
                return Err(Error::invalid(format!(
                    "row {}: channel index {channel} out of sequence",
                    row + 1
                )));
            }
            let lo = parse_f(1)?;
            let hi = parse_f(2)?;
            let count: u64 = field(3)?
                .parse()
                .map_err(|_| Error::invalid(format!("row {}: count must be a non-negative integer", row + 1)))?;
            match edges.last() {
                None => edges.push(lo),
                Some(&prev_hi) => {
                    let tol = 1e-9 * (1.0 + f64::abs(prev_hi));
                    if (lo - prev_hi).abs() > tol {
                        return Err(Error::invalid(format!(
                            "row {}: lo edge {lo} does not continue previous hi {prev_hi}",
                            row + 1
                        )));
                    }
                }
            }
            edges.push(hi);
            counts.push(count);
            if has_background {
                background.push(parse_f(4)?);
            }
        }
        Self::new(counts, edges, exposure, has_background.then_some(background))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = writer;
        if self.exposure != 1.0 {
            writeln!(w, "# exposure={}", self.exposure)?;
        }
        let mut wtr = csv::Writer::from_writer(w);
        match &self.background {
            Some(_) => wtr.write_record(["channel", "lo", "hi", "count", "background"])?,
            None => wtr.write_record(["channel", "lo", "hi", "count"])?,
        }
        for i in 0..self.len() {
            let mut rec = vec![
                (i + 1).to_string(),
                self.edges[i].to_string(),
                self.edges[i + 1].to_string(),
                self.counts[i].to_string(),
            ];
            if let Some(b) = &self.background {
                rec.push(b[i].to_string());
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Edges `1 + i/n` for `i = 0..=n`.
pub fn unit_grid_edges(n: usize) -> Vec<f64> {
    (0..=n).map(|i| 1.0 + i as f64 / n as f64).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RebinOutcome {
    pub dataset: BinnedDataset,
    /// The final merged bin holds fewer than `min_count` counts.
    pub last_bin_short: bool,
}

/// Greedy left-to-right merge until every merged bin holds at least
/// `min_count` counts. A trailing remainder is kept as its own bin and flagged.
pub fn rebin(dataset: &BinnedDataset, min_count: u64) -> Result<RebinOutcome> {
    if min_count == 0 {
        return Err(Error::domain("min_count must be at least 1"));
    }
    if dataset.is_empty() {
        return Err(Error::domain("cannot rebin an empty dataset"));
    }
    let mut counts = Vec::new();
    let mut edges = vec![dataset.edges[0]];
    let mut background = dataset.background.as_ref().map(|_| Vec::new());
    let mut acc = 0u64;
    let mut acc_bg = 0.0;
    let mut open = false;
    for i in 0..dataset.len() {
        acc += dataset.counts[i];
        if let Some(b) = &dataset.background {
            acc_bg += b[i];
        }
        open = true;
        if acc >= min_count {
            counts.push(acc);
            edges.push(dataset.edges[i + 1]);
            if let Some(bg) = background.as_mut() {
                bg.push(acc_bg);
            }
            acc = 0;
            acc_bg = 0.0;
            open = false;
        }
    }
    let last_bin_short = open;
    if open {
        counts.push(acc);
        edges.push(*dataset.edges.last().unwrap());
        if let Some(bg) = background.as_mut() {
            bg.push(acc_bg);
        }
    }
    Ok(RebinOutcome {
        dataset: BinnedDataset::new(counts, edges, dataset.exposure, background)?,
        last_bin_short,
    })
}

/// How [`segment`] obtains the per-segment counts.
#[derive(Clone, Debug)]
pub enum SegmentMode {
    /// Split every count multinomially into `k` equal-probability parts.
    Thin { seed: u64 },
    /// Counts supplied per segment by the caller (one vector per segment).
    Supplied(Vec<Vec<u64>>),
}

/// Split an exposure into `k` segments of exposure `T/k` each.
///
/// Background rates are kept as-is since they are per unit exposure.
pub fn segment(dataset: &BinnedDataset, k: usize, mode: SegmentMode) -> Result<Vec<BinnedDataset>> {
    if k == 0 {
        return Err(Error::domain("number of segments must be at least 1"));
    }
    let exposure = dataset.exposure / k as f64;
    let per_segment: Vec<Vec<u64>> = match mode {
        SegmentMode::Supplied(counts) => {
            if counts.len() != k {
                return Err(Error::LengthMismatch {
                    expected: k,
                    found: counts.len(),
                });
            }
            counts
        }
        SegmentMode::Thin { seed } => {
            if k == 1 {
                vec![dataset.counts.clone()]
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut out = vec![vec![0u64; dataset.len()]; k];
                for (i, &n) in dataset.counts.iter().enumerate() {
                    let mut remaining = n;
                    for (j, seg) in out.iter_mut().enumerate() {
                        let left = (k - j) as f64;
                        let take = if j + 1 == k || remaining == 0 {
                            remaining
                        } else {
                            Binomial::new(remaining, 1.0 / left)
                                .expect("valid binomial parameters")
                                .sample(&mut rng)
                        };
                        seg[i] = take;
                        remaining -= take;
                    }
                }
                out
            }
        }
    };
    per_segment
        .into_iter()
        .map(|c| BinnedDataset::new(c, dataset.edges.clone(), exposure, dataset.background.clone()))
        .collect()
}
