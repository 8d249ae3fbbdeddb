//! The C (Cash) statistic: twice the Poisson deviance against the saturated model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::BinnedDataset;
use crate::error::{Error, Result};
use crate::sum::KahanSum;

/// Value of C at one parameter point, with its per-bin decomposition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CValue {
    pub total: f64,
    pub per_bin: Vec<f64>,
}

/// `2 [s - N ln s - N + N ln N]` with `0 ln 0 = 0`.
///
/// Evaluated as `2 s phi(r)` with `r = (N - s)/s` and
/// `phi(r) = (1 + r) ln(1 + r) - r`, which avoids the cancellation of the
/// textbook form when `N` is close to `s`.
pub fn c_per_bin(n: u64, s: f64) -> Result<f64> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::domain(format!(
            "expected count must be positive and finite, got {s}"
        )));
    }
    Ok(c_term(n as f64, s))
}

/// Unchecked per-bin term; `s` must be positive.
#[inline]
pub(crate) fn c_term(n: f64, s: f64) -> f64 {
    if n == 0.0 {
        return 2.0 * s;
    }
    let r = (n - s) / s;
    let phi = if r.abs() < 0.1 {
        phi_series(r)
    } else {
        let t = n / s;
        t * t.ln() - (t - 1.0)
    };
    (2.0 * s * phi).max(0.0)
}

// phi(r) = sum_{k>=2} (-1)^k r^k / (k (k-1)), converging fast for |r| < 0.1.
#[inline]
fn phi_series(r: f64) -> f64 {
    let mut term = r * r;
    let mut acc = 0.0;
    let mut sign = 1.0;
    for k in 2..40u32 {
        let k = k as f64;
        let contrib = sign * term / (k * (k - 1.0));
        acc += contrib;
        if contrib.abs() <= 1e-17 * acc.abs() {
            break;
        }
        term *= r;
        sign = -sign;
    }
    acc
}

fn check_rates(data: &BinnedDataset, s: &[f64]) -> Result<()> {
    if s.len() != data.len() {
        return Err(Error::LengthMismatch {
            expected: data.len(),
            found: s.len(),
        });
    }
    if let Some(i) = s.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::domain(format!(
            "expected count in bin {i} is {} (must be positive)",
            s[i]
        )));
    }
    Ok(())
}

pub fn c_function(data: &BinnedDataset, s: &[f64]) -> Result<CValue> {
    check_rates(data, s)?;
    let mut acc = KahanSum::new();
    let per_bin: Vec<f64> = data
        .counts()
        .iter()
        .zip(s)
        .map(|(&n, &si)| {
            let c = c_term(n as f64, si);
            acc.add(c);
            c
        })
        .collect();
    Ok(CValue {
        total: acc.value(),
        per_bin,
    })
}

/// `grad C = 2 sum_i (1 - N_i/s_i) grad s_i`, with `X` the `n x d` Jacobian of `s`.
pub fn c_gradient(data: &BinnedDataset, s: &[f64], x: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_rates(data, s)?;
    if x.nrows() != s.len() {
        return Err(Error::LengthMismatch {
            expected: s.len(),
            found: x.nrows(),
        });
    }
    let w: Vec<f64> = data
        .counts()
        .iter()
        .zip(s)
        .map(|(&n, &si)| 2.0 * (1.0 - n as f64 / si))
        .collect();
    Ok(weighted_column_sums(x, &w))
}

/// Poisson score `D l = sum_i (N_i/s_i - 1) grad s_i`.
pub fn score(data: &BinnedDataset, s: &[f64], x: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_rates(data, s)?;
    if x.nrows() != s.len() {
        return Err(Error::LengthMismatch {
            expected: s.len(),
            found: x.nrows(),
        });
    }
    let w: Vec<f64> = data
        .counts()
        .iter()
        .zip(s)
        .map(|(&n, &si)| n as f64 / si - 1.0)
        .collect();
    Ok(weighted_column_sums(x, &w))
}

pub(crate) fn weighted_column_sums(x: &DMatrix<f64>, w: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        x.ncols(),
        x.column_iter().map(|col| {
            let mut acc = KahanSum::new();
            for (xi, wi) in col.iter().zip(w) {
                acc.add(xi * wi);
            }
            acc.value()
        }),
    )
}
