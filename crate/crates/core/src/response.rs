//! Instrument response: redistribution matrix, effective area and model-bin grid.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// `J x n` redistribution probabilities with per-model-bin effective area.
#[derive(Clone, Debug, PartialEq)]
pub struct InstrumentResponse {
    rmf: DMatrix<f64>,
    area: Vec<f64>,
    model_edges: Vec<f64>,
}

const ROW_SUM_TOL: f64 = 1e-12;

impl InstrumentResponse {
    pub fn new(rmf: DMatrix<f64>, area: Vec<f64>, model_edges: Vec<f64>) -> Result<Self> {
        let j = rmf.nrows();
        if j == 0 || rmf.ncols() == 0 {
            return Err(Error::domain("response matrix must be non-empty"));
        }
        if area.len() != j {
            return Err(Error::LengthMismatch {
                expected: j,
                found: area.len(),
            });
        }
        if model_edges.len() != j + 1 {
            return Err(Error::LengthMismatch {
                expected: j + 1,
                found: model_edges.len(),
            });
        }
        if model_edges.windows(2).any(|w| !(w[1] > w[0])) || model_edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::domain("model-bin edges must be finite and strictly increasing"));
        }
        if let Some(v) = rmf.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::domain(format!("redistribution entry {v} outside [0, 1]")));
        }
        for (r, row) in rmf.row_iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if sum > 1.0 + ROW_SUM_TOL {
                return Err(Error::domain(format!("redistribution row {r} sums to {sum} > 1")));
            }
        }
        if area.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::domain("effective area must be finite and non-negative"));
        }
        Ok(Self { rmf, area, model_edges })
    }

    /// Perfect response: `R = I`, unit area, model bins equal to channels.
    pub fn identity(edges: &[f64]) -> Result<Self> {
        let n = edges.len().saturating_sub(1);
        Self::new(DMatrix::identity(n, n), vec![1.0; n], edges.to_vec())
    }

    /// Almost diagonal: 0.8 stays, 0.1 leaks to each neighbour; the end rows keep 0.9.
    pub fn tridiagonal(edges: &[f64]) -> Result<Self> {
        let n = edges.len().saturating_sub(1);
        if n < 2 {
            return Err(Error::domain("tridiagonal response needs at least two bins"));
        }
        let mut r = DMatrix::zeros(n, n);
        for j in 0..n {
            if j == 0 {
                r[(0, 0)] = 0.9;
                r[(0, 1)] = 0.1;
            } else if j == n - 1 {
                r[(j, j)] = 0.9;
                r[(j, j - 1)] = 0.1;
            } else {
                r[(j, j - 1)] = 0.1;
                r[(j, j)] = 0.8;
                r[(j, j + 1)] = 0.1;
            }
        }
        Self::new(r, vec![1.0; n], edges.to_vec())
    }

    /// Strongly dispersed: `R = (1 1^T + n I) / 2n`.
    pub fn dispersed(edges: &[f64]) -> Result<Self> {
        let n = edges.len().saturating_sub(1);
        let nf = n as f64;
        let r = DMatrix::from_fn(n, n, |a, b| {
            if a == b {
                (1.0 + nf) / (2.0 * nf)
            } else {
                1.0 / (2.0 * nf)
            }
        });
        Self::new(r, vec![1.0; n], edges.to_vec())
    }

    /// Rank-one response spreading every model bin evenly over all channels, `1 1^T / n`.
    pub fn uniform(edges: &[f64]) -> Result<Self> {
        let n = edges.len().saturating_sub(1);
        let r = DMatrix::from_element(n, n, 1.0 / n as f64);
        Self::new(r, vec![1.0; n], edges.to_vec())
    }

    pub fn with_area(self, area: Vec<f64>) -> Result<Self> {
        Self::new(self.rmf, area, self.model_edges)
    }

    pub fn rmf(&self) -> &DMatrix<f64> {
        &self.rmf
    }

    pub fn area(&self) -> &[f64] {
        &self.area
    }

    pub fn model_edges(&self) -> &[f64] {
        &self.model_edges
    }

    pub fn n_model_bins(&self) -> usize {
        self.rmf.nrows()
    }

    pub fn n_channels(&self) -> usize {
        self.rmf.ncols()
    }

    pub fn model_midpoints(&self) -> Vec<f64> {
        self.model_edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn model_widths(&self) -> Vec<f64> {
        self.model_edges.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Read a headerless dense `rmf.csv` and an `arf.csv` with header `j,x_mid,width,area`.
    pub fn read_csv(rmf_path: impl AsRef<Path>, arf_path: impl AsRef<Path>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(rmf_path.as_ref())?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| Error::invalid(format!("rmf row {}: bad number `{v}`", r + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let j = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("rmf rows have differing lengths"));
        }
        let rmf = DMatrix::from_fn(j, n, |a, b| rows[a][b]);

        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(arf_path.as_ref())?;
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
        if headers != ["j", "x_mid", "width", "area"] {
            return Err(Error::invalid(format!(
                "arf header must be `j,x_mid,width,area`, got `{}`",
                headers.join(",")
            )));
        }
        let mut mids = Vec::new();
        let mut widths = Vec::new();
        let mut area = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let get = |k: usize| -> Result<f64> {
                let v = rec.get(k).unwrap_or("");
                v.parse()
                    .map_err(|_| Error::invalid(format!("arf row {}: bad number `{v}`", r + 1)))
            };
            mids.push(get(1)?);
            widths.push(get(2)?);
            area.push(get(3)?);
        }
        if widths.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::invalid("arf widths must be positive"));
        }
        let mut edges = Vec::with_capacity(mids.len() + 1);
        if let (Some(m), Some(w)) = (mids.first(), widths.first()) {
            edges.push(m - 0.5 * w);
        }
        for (m, w) in mids.iter().zip(&widths) {
            edges.push(m + 0.5 * w);
        }
        Self::new(rmf, area, edges)
    }

    pub fn write_csv(&self, rmf_path: impl AsRef<Path>, arf_path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(rmf_path.as_ref())?;
        for row in self.rmf.row_iter() {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(arf_path.as_ref())?;
        w.write_record(["j", "x_mid", "width", "area"])?;
        for (j, ((m, wd), a)) in self
            .model_midpoints()
            .iter()
            .zip(self.model_widths())
            .zip(&self.area)
            .enumerate()
        {
            w.write_record([(j + 1).to_string(), m.to_string(), wd.to_string(), a.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}
