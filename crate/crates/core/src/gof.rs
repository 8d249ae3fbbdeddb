//! Goodness-of-fit tests for a fitted Poisson model: LR-chi2, plug-in and
//! corrected Z-tests, parametric and double bootstrap.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf::erfc;

use crate::cumulants::{CumulantSet, CumulantSource};
use crate::dataset::BinnedDataset;
use crate::error::{Error, Result};
use crate::fit::{condition_number, design_at, fit_with, FitOptions, FitResult, MAX_CONDITION};
use crate::model::SpectralModel;
use crate::seed::{derive_path, derive_seed};
use crate::simulate::sample_counts;
use crate::sum::{kahan_sum, KahanSum};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    LrChi2,
    NaiveZBoot,
    NaiveZHighorder,
    CorrectedZFirst,
    CorrectedZHigh,
    Bootstrap,
    DoubleBootstrap,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::LrChi2,
        Algorithm::NaiveZBoot,
        Algorithm::NaiveZHighorder,
        Algorithm::CorrectedZFirst,
        Algorithm::CorrectedZHigh,
        Algorithm::Bootstrap,
        Algorithm::DoubleBootstrap,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Algorithm::LrChi2 => "lr-chi2",
            Algorithm::NaiveZBoot => "naive-z-boot",
            Algorithm::NaiveZHighorder => "naive-z-highorder",
            Algorithm::CorrectedZFirst => "corrected-z-first",
            Algorithm::CorrectedZHigh => "corrected-z-high",
            Algorithm::Bootstrap => "bootstrap",
            Algorithm::DoubleBootstrap => "double-bootstrap",
        }
    }

    /// Whether the method draws random replicates (and so needs a seed).
    pub fn is_stochastic(self) -> bool {
        matches!(
            self,
            Algorithm::NaiveZBoot | Algorithm::Bootstrap | Algorithm::DoubleBootstrap
        )
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL.into_iter().find(|a| a.label() == s).ok_or_else(|| {
            let names: Vec<&str> = Algorithm::ALL.iter().map(|a| a.label()).collect();
            Error::invalid(format!("unknown method `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentKind {
    Unconditional,
    Conditional,
    FirstOrder,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentPair {
    pub mean: f64,
    pub var: f64,
    pub kind: MomentKind,
}

/// How the second-order mean correction `M = X^T Sigma X F^-1` is reduced to a scalar.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanCorrection {
    /// `trace(M)`, invariant under reparameterisation.
    #[default]
    Trace,
    /// `1^T M 1`, the literal sum of all entries.
    OnesQuadratic,
}

/// Bootstrap details kept in a [`GofResult`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootRecord {
    #[serde(rename = "B")]
    pub b: usize,
    pub seed: u64,
    /// Replicate values of `C(theta_hat)`; for the double bootstrap the outer level.
    pub replicates: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed_seeds: Vec<u64>,
    /// Unadjusted first-level p-value (double bootstrap only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_first_level: Option<f64>,
    /// Inner-level p-values (double bootstrap only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_p: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GofResult {
    pub algorithm: Algorithm,
    pub statistic: f64,
    pub p_value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_var: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dof: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_form: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boot: Option<BootRecord>,
}

impl GofResult {
    fn new(algorithm: Algorithm, statistic: f64, p_value: f64) -> Self {
        Self {
            algorithm,
            statistic,
            p_value,
            ref_mean: None,
            ref_var: None,
            dof: None,
            q_form: None,
            boot: None,
        }
    }
}

/// Upper-tail p-value of C against `chi2_{n-d}`.
pub fn lr_chi2_test(c_min: f64, n: usize, d: usize) -> Result<GofResult> {
    if n <= d {
        return Err(Error::domain(format!("LR-chi2 test needs n > d (n = {n}, d = {d})")));
    }
    let dof = n - d;
    let chi = ChiSquared::new(dof as f64).map_err(|e| Error::domain(e.to_string()))?;
    let p = if c_min <= 0.0 { 1.0 } else { chi.sf(c_min) };
    let mut r = GofResult::new(Algorithm::LrChi2, c_min, p.clamp(0.0, 1.0));
    r.dof = Some(dof);
    Ok(r)
}

/// Upper-tail normal p-value of `(c - mean) / sqrt(var)`.
pub fn z_p_value(c: f64, mean: f64, var: f64) -> Result<f64> {
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::NonPositiveVariance { variance: var });
    }
    let z = (c - mean) / var.sqrt();
    Ok((0.5 * erfc(z / std::f64::consts::SQRT_2)).clamp(0.0, 1.0))
}

fn z_result(alg: Algorithm, c_min: f64, mean: f64, var: f64, q_form: Option<f64>) -> Result<GofResult> {
    let p = z_p_value(c_min, mean, var)?;
    let mut r = GofResult::new(alg, c_min, p);
    r.ref_mean = Some(mean);
    r.ref_var = Some(var);
    r.q_form = q_form;
    Ok(r)
}

/// Sums of per-bin cumulants and the estimation corrections at one fitted point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentSummary {
    pub d: usize,
    pub sum_k1: f64,
    pub sum_k2: f64,
    /// `c^T F^-1 c` with `c = X^T (k11 / s)`.
    pub q_form: f64,
    /// Scalar reduction of `X^T Sigma X F^-1`.
    pub mean_correction: f64,
}

impl MomentSummary {
    pub fn unconditional(&self) -> MomentPair {
        MomentPair {
            mean: self.sum_k1 - self.d as f64,
            var: self.sum_k2,
            kind: MomentKind::Unconditional,
        }
    }

    pub fn first_order(&self) -> MomentPair {
        MomentPair {
            mean: self.sum_k1,
            var: self.sum_k2 - self.q_form,
            kind: MomentKind::FirstOrder,
        }
    }

    pub fn conditional(&self) -> MomentPair {
        MomentPair {
            mean: self.sum_k1 - 0.5 * self.mean_correction,
            var: self.sum_k2 - self.q_form,
            kind: MomentKind::Conditional,
        }
    }
}

/// `X^T diag(w) X`.
fn weighted_gram(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let d = x.ncols();
    let mut g = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let mut acc = KahanSum::new();
            for i in 0..x.nrows() {
                acc.add(x[(i, a)] * w[i] * x[(i, b)]);
            }
            g[(a, b)] = acc.value();
            g[(b, a)] = g[(a, b)];
        }
    }
    g
}

fn factorise(f: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let condition = condition_number(f);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::IllConditioned { condition });
    }
    f.clone().cholesky().ok_or(Error::IllConditioned {
        condition: f64::INFINITY,
    })
}

fn reduce(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>, g: &DMatrix<f64>, how: MeanCorrection) -> f64 {
    let d = g.nrows();
    match how {
        MeanCorrection::Trace => chol.solve(g).trace(),
        MeanCorrection::OnesQuadratic => {
            let ones = DVector::from_element(d, 1.0);
            (g * &ones).dot(&chol.solve(&ones))
        }
    }
}

/// Moment sums from expected counts `s`, Jacobian `X` (`n x d`) and per-bin cumulants.
pub fn moment_summary(s: &[f64], x: &DMatrix<f64>, cums: &[CumulantSet], how: MeanCorrection) -> Result<MomentSummary> {
    let n = s.len();
    if x.nrows() != n || cums.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            found: x.nrows().min(cums.len()),
        });
    }
    let d = x.ncols();
    if n <= d && d > 0 {
        // Saturated: C(theta_hat) is identically zero.
        return Err(Error::NonPositiveVariance { variance: 0.0 });
    }
    let sum_k1 = kahan_sum(cums.iter().map(|c| c.k1));
    let sum_k2 = kahan_sum(cums.iter().map(|c| c.k2));
    if d == 0 {
        return Ok(MomentSummary {
            d,
            sum_k1,
            sum_k2,
            q_form: 0.0,
            mean_correction: 0.0,
        });
    }
    let inv_s: Vec<f64> = s.iter().map(|v| 1.0 / v).collect();
    let f = weighted_gram(x, &inv_s);
    let chol = factorise(&f)?;
    let a: Vec<f64> = cums.iter().zip(s).map(|(c, si)| c.k11 / si).collect();
    let c = crate::cash::weighted_column_sums(x, &a);
    let w = chol.solve(&c);
    let q_form = c.dot(&w).max(0.0);
    let t = x * &w;
    let sigma: Vec<f64> = (0..n)
        .map(|i| {
            let si = s[i];
            cums[i].k12 / (si * si) - t[i] * cums[i].k03 / (si * si * si)
        })
        .collect();
    let g = weighted_gram(x, &sigma);
    Ok(MomentSummary {
        d,
        sum_k1,
        sum_k2,
        q_form,
        mean_correction: reduce(&chol, &g, how),
    })
}

/// The same sums for `log s = X~ beta`, through the explicit projection
/// `Q' = X~ (X~^T V X~)^-1 X~^T`; an independent route used for checking.
pub fn log_linear_moment_summary(
    design: &DMatrix<f64>,
    s: &[f64],
    cums: &[CumulantSet],
    how: MeanCorrection,
) -> Result<MomentSummary> {
    let n = s.len();
    let d = design.ncols();
    if design.nrows() != n || cums.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            found: design.nrows().min(cums.len()),
        });
    }
    let f = weighted_gram(design, s);
    let chol = factorise(&f)?;
    let q = design * chol.solve(&design.transpose());
    let k11 = DVector::from_iterator(n, cums.iter().map(|c| c.k11));
    let u = &q * &k11;
    let sigma: Vec<f64> = (0..n).map(|i| cums[i].k12 - u[i] * cums[i].k03).collect();
    let g = weighted_gram(design, &sigma);
    let c = design.transpose() * &k11;
    Ok(MomentSummary {
        d,
        sum_k1: kahan_sum(cums.iter().map(|c| c.k1)),
        sum_k2: kahan_sum(cums.iter().map(|c| c.k2)),
        q_form: c.dot(&chol.solve(&c)).max(0.0),
        mean_correction: reduce(&chol, &g, how),
    })
}

/// Moment sums at `theta` for `model`.
pub fn summary_at(
    model: &dyn SpectralModel,
    theta: &[f64],
    src: &CumulantSource,
    how: MeanCorrection,
) -> Result<MomentSummary> {
    let (s, x) = design_at(model, theta)?;
    let cums = src.at_all(&s)?;
    moment_summary(&s, &x, &cums, how)
}

/// `E C(theta_hat) = sum k1 - d`, `Var = sum k2`.
pub fn unconditional_moments(model: &dyn SpectralModel, theta: &[f64], src: &CumulantSource) -> Result<MomentPair> {
    let (s, _) = design_at(model, theta)?;
    let cums = src.at_all(&s)?;
    Ok(MomentPair {
        mean: kahan_sum(cums.iter().map(|c| c.k1)) - model.n_params() as f64,
        var: kahan_sum(cums.iter().map(|c| c.k2)),
        kind: MomentKind::Unconditional,
    })
}

pub fn quadratic_form_q(model: &dyn SpectralModel, theta: &[f64], src: &CumulantSource) -> Result<f64> {
    Ok(summary_at(model, theta, src, MeanCorrection::Trace)?.q_form)
}

/// Mean and variance of `C(theta_hat)` given `theta_hat`.
pub fn conditional_moments(
    model: &dyn SpectralModel,
    theta: &[f64],
    src: &CumulantSource,
    how: MeanCorrection,
) -> Result<MomentPair> {
    Ok(summary_at(model, theta, src, how)?.conditional())
}

pub fn corrected_z_first(
    c_min: f64,
    model: &dyn SpectralModel,
    theta: &[f64],
    src: &CumulantSource,
) -> Result<GofResult> {
    let m = summary_at(model, theta, src, MeanCorrection::Trace)?;
    let p = m.first_order();
    z_result(Algorithm::CorrectedZFirst, c_min, p.mean, p.var, Some(m.q_form))
}

pub fn corrected_z_high(
    c_min: f64,
    model: &dyn SpectralModel,
    theta: &[f64],
    src: &CumulantSource,
    how: MeanCorrection,
) -> Result<GofResult> {
    let m = summary_at(model, theta, src, how)?;
    let p = m.conditional();
    z_result(Algorithm::CorrectedZHigh, c_min, p.mean, p.var, Some(m.q_form))
}

/// Plug-in Z-test with `sum k1 - d` (or `sum k1` when `drop_d`) and `sum k2`.
pub fn naive_z_highorder(
    c_min: f64,
    model: &dyn SpectralModel,
    theta: &[f64],
    src: &CumulantSource,
    drop_d: bool,
) -> Result<GofResult> {
    if model.n_bins() <= model.n_params() {
        return Err(Error::NonPositiveVariance { variance: 0.0 });
    }
    let m = unconditional_moments(model, theta, src)?;
    let mean = if drop_d {
        m.mean + model.n_params() as f64
    } else {
        m.mean
    };
    z_result(Algorithm::NaiveZHighorder, c_min, mean, m.var, None)
}

/// Minimised C of `b` datasets simulated at `theta` and refitted from `theta`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicateSample {
    pub values: Vec<f64>,
    /// Fitted parameters per successful replicate.
    pub thetas: Vec<Vec<f64>>,
    pub failed_seeds: Vec<u64>,
}

/// Replicate seed with its refitted C and theta, `None` when the refit failed.
type Refit = (u64, Option<(f64, Vec<f64>)>);

/// Largest tolerated share of failed replicate fits.
pub const MAX_FAILURE_SHARE: f64 = 0.05;

pub fn bootstrap_replicates(
    data: &BinnedDataset,
    model: &dyn SpectralModel,
    theta: &[f64],
    b: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<ReplicateSample> {
    let (s, _) = design_at(model, theta)?;
    let outcomes: Vec<Refit> = (0..b as u64)
        .into_par_iter()
        .map(|m| {
            let rs = derive_seed(seed, m);
            let fitted = data
                .with_counts(sample_counts(&s, rs))
                .and_then(|d| fit_with(&d, model, Some(theta), opts))
                .ok()
                .map(|f| (f.c_min, f.theta_hat.values));
            (rs, fitted)
        })
        .collect();
    let mut out = ReplicateSample {
        values: Vec::with_capacity(b),
        thetas: Vec::with_capacity(b),
        failed_seeds: Vec::new(),
    };
    for (rs, r) in outcomes {
        match r {
            Some((c, t)) => {
                out.values.push(c);
                out.thetas.push(t);
            }
            None => out.failed_seeds.push(rs),
        }
    }
    if out.failed_seeds.len() as f64 > MAX_FAILURE_SHARE * b as f64 || out.values.is_empty() {
        return Err(Error::ReplicateFailures {
            total: b,
            failed_seeds: out.failed_seeds,
        });
    }
    if !out.failed_seeds.is_empty() {
        log::warn!(
            "{} of {b} bootstrap refits failed and were dropped",
            out.failed_seeds.len()
        );
    }
    Ok(out)
}

fn upper_tail_share(values: &[f64], c: f64) -> f64 {
    values.iter().filter(|&&v| v >= c).count() as f64 / values.len() as f64
}

pub fn naive_z_boot(
    c_min: f64,
    data: &BinnedDataset,
    model: &dyn SpectralModel,
    theta: &[f64],
    b: usize,
    seed: u64,
) -> Result<GofResult> {
    if b < 2 {
        return Err(Error::domain("bootstrap Z-test needs B >= 2"));
    }
    let rep = bootstrap_replicates(data, model, theta, b, seed, &FitOptions::single_start())?;
    let m = rep.values.len() as f64;
    let mean = kahan_sum(rep.values.iter().copied()) / m;
    let var = kahan_sum(rep.values.iter().map(|v| (v - mean) * (v - mean))) / (m - 1.0);
    let mut r = z_result(Algorithm::NaiveZBoot, c_min, mean, var, None)?;
    r.boot = Some(BootRecord {
        b,
        seed,
        replicates: rep.values,
        failed_seeds: rep.failed_seeds,
        p_first_level: None,
        inner_p: None,
    });
    Ok(r)
}

/// Share of replicates with `C >= c_min`; `add_one` gives `(1 + count) / (B + 1)`.
pub fn parametric_bootstrap(
    c_min: f64,
    data: &BinnedDataset,
    model: &dyn SpectralModel,
    theta: &[f64],
    b: usize,
    seed: u64,
    add_one: bool,
) -> Result<GofResult> {
    if b < 1 {
        return Err(Error::domain("bootstrap needs B >= 1"));
    }
    let rep = bootstrap_replicates(data, model, theta, b, seed, &FitOptions::single_start())?;
    let p = bootstrap_p_value(&rep.values, c_min, add_one);
    let mut r = GofResult::new(Algorithm::Bootstrap, c_min, p);
    r.boot = Some(BootRecord {
        b,
        seed,
        replicates: rep.values,
        failed_seeds: rep.failed_seeds,
        p_first_level: None,
        inner_p: None,
    });
    Ok(r)
}

pub fn bootstrap_p_value(values: &[f64], c_min: f64, add_one: bool) -> f64 {
    if add_one {
        let count = values.iter().filter(|&&v| v >= c_min).count() as f64;
        (1.0 + count) / (values.len() as f64 + 1.0)
    } else {
        upper_tail_share(values, c_min)
    }
}

/// Fits beyond which the double bootstrap logs a runtime warning.
pub const DEFAULT_FIT_BUDGET: usize = 1_000_000;

/// Adjusted p-value `#{p_j <= p_hat} / B1` from `B1` outer and `B2` inner replicates.
#[allow(clippy::too_many_arguments)]
pub fn double_bootstrap(
    c_min: f64,
    data: &BinnedDataset,
    model: &dyn SpectralModel,
    theta: &[f64],
    b1: usize,
    b2: usize,
    seed: u64,
    budget: usize,
) -> Result<GofResult> {
    if b1 < 1 || b2 < 1 {
        return Err(Error::domain("double bootstrap needs B1, B2 >= 1"));
    }
    let fits = b1.saturating_mul(b2 + 1);
    if fits > budget {
        log::warn!("double bootstrap will run {fits} fits, above the budget of {budget}");
    }
    let opts = FitOptions::single_start();
    let outer = bootstrap_replicates(data, model, theta, b1, derive_seed(seed, 0), &opts)?;
    let inner_seed = derive_seed(seed, 1);
    let inner: Vec<Result<f64>> = outer
        .values
        .par_iter()
        .zip(outer.thetas.par_iter())
        .enumerate()
        .map(|(j, (&c_j, theta_j))| {
            let rep = bootstrap_replicates(data, model, theta_j, b2, derive_path(inner_seed, &[j as u64]), &opts)?;
            Ok(upper_tail_share(&rep.values, c_j))
        })
        .collect();
    let inner_p = inner.into_iter().collect::<Result<Vec<f64>>>()?;
    let p_hat = upper_tail_share(&outer.values, c_min);
    let p_adj = inner_p.iter().filter(|&&p| p <= p_hat).count() as f64 / inner_p.len() as f64;
    let mut r = GofResult::new(Algorithm::DoubleBootstrap, c_min, p_adj);
    r.boot = Some(BootRecord {
        b: b1,
        seed,
        replicates: outer.values,
        failed_seeds: outer.failed_seeds,
        p_first_level: Some(p_hat),
        inner_p: Some(inner_p),
    });
    Ok(r)
}

/// Settings shared by [`run_gof`].
#[derive(Clone, Debug)]
pub struct GofOptions {
    pub b: usize,
    pub b1: usize,
    pub b2: usize,
    pub seed: Option<u64>,
    pub add_one: bool,
    /// Plug-in Z-test mean without the `-d` term.
    pub naive_drop_d: bool,
    pub mean_correction: MeanCorrection,
    pub fit_budget: usize,
}

impl Default for GofOptions {
    fn default() -> Self {
        Self {
            b: 300,
            b1: 300,
            b2: 300,
            seed: None,
            add_one: false,
            naive_drop_d: false,
            mean_correction: MeanCorrection::Trace,
            fit_budget: DEFAULT_FIT_BUDGET,
        }
    }
}

/// Run one method on a fitted dataset.
pub fn run_gof(
    alg: Algorithm,
    data: &BinnedDataset,
    model: &dyn SpectralModel,
    fit: &FitResult,
    src: &CumulantSource,
    opts: &GofOptions,
) -> Result<GofResult> {
    let theta = fit.theta();
    let c = fit.c_min;
    let seed = || {
        opts.seed
            .ok_or_else(|| Error::invalid(format!("method {alg} needs an explicit seed")))
    };
    match alg {
        Algorithm::LrChi2 => lr_chi2_test(c, data.len(), model.n_params()),
        Algorithm::NaiveZHighorder => naive_z_highorder(c, model, theta, src, opts.naive_drop_d),
        Algorithm::CorrectedZFirst => corrected_z_first(c, model, theta, src),
        Algorithm::CorrectedZHigh => corrected_z_high(c, model, theta, src, opts.mean_correction),
        Algorithm::NaiveZBoot => naive_z_boot(c, data, model, theta, opts.b, seed()?),
        Algorithm::Bootstrap => parametric_bootstrap(c, data, model, theta, opts.b, seed()?, opts.add_one),
        Algorithm::DoubleBootstrap => {
            double_bootstrap(c, data, model, theta, opts.b1, opts.b2, seed()?, opts.fit_budget)
        }
    }
}
