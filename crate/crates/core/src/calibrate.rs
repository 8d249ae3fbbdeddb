//! Monte Carlo harness: null distributions of `C(theta_hat)`, Type-I error and
//! power of the tests, response-matrix sensitivity and runtime comparison.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::cumulants::CumulantSource;
use crate::dataset::{unit_grid_edges, BinnedDataset};
use crate::error::{Error, Result};
use crate::fit::{fit_with, FitOptions, FitResult};
use crate::gof::{run_gof, Algorithm, GofOptions, GofResult, MeanCorrection};
use crate::model::{expected_counts, Constant, EnergyPoint, FoldedModel, PowerLaw, PowerLawWithLine, SpectralModel};
use crate::response::InstrumentResponse;
use crate::seed::{derive_path, derive_seed};
use crate::simulate::sample_counts;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "constant")]
    Constant,
    #[serde(rename = "powerlaw")]
    PowerLaw,
    #[serde(rename = "powerlaw+emission")]
    Emission,
    #[serde(rename = "powerlaw+absorption")]
    Absorption,
}

impl Family {
    /// Data come from the line alternative rather than the null.
    pub fn is_alternative(self) -> bool {
        matches!(self, Family::Emission | Family::Absorption)
    }

    fn default_psi_factor(self) -> f64 {
        match self {
            Family::Absorption => 0.1,
            _ => 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Type1,
    Power,
}

fn default_gamma() -> f64 {
    3.0
}
fn default_alphas() -> Vec<f64> {
    vec![0.1]
}
fn default_b() -> usize {
    300
}
fn default_line_fraction() -> f64 {
    0.1
}

/// Factor grid of a Monte Carlo study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentGrid {
    pub family: Family,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub k_values: Vec<f64>,
    pub n_values: Vec<usize>,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    pub replications: usize,
    #[serde(default = "default_b")]
    pub bootstrap_b: usize,
    pub seed: u64,
    pub algorithms: Vec<Algorithm>,
    /// Line start as a fraction of `n`.
    #[serde(default = "default_line_fraction")]
    pub line_start: f64,
    /// Line width as a fraction of `n`.
    #[serde(default = "default_line_fraction")]
    pub line_width: f64,
    /// `Psi = psi_factor * K`; defaults to 2 (emission) or 0.1 (absorption).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi_factor: Option<f64>,
    #[serde(default)]
    pub naive_drop_d: bool,
    #[serde(default)]
    pub mean_correction: MeanCorrection,
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::invalid("replications must be at least 1"));
        }
        if self.k_values.is_empty() || self.k_values.iter().any(|k| !(*k > 0.0 && k.is_finite())) {
            return Err(Error::invalid("k_values must be non-empty and positive"));
        }
        if self.n_values.is_empty() || self.n_values.iter().any(|&n| n < 2) {
            return Err(Error::invalid("n_values must be non-empty with n >= 2"));
        }
        if self.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::invalid("alphas must lie in (0, 1)"));
        }
        if self.algorithms.is_empty() {
            return Err(Error::invalid("at least one algorithm is required"));
        }
        if !(self.line_start >= 0.0 && self.line_width > 0.0 && self.line_start + self.line_width <= 1.0) {
            return Err(Error::invalid("line placement must lie within the channel range"));
        }
        if let Some(f) = self.psi_factor {
            if !(f > 0.0) {
                return Err(Error::invalid("psi_factor must be positive"));
            }
            if !self.family.is_alternative() {
                return Err(Error::invalid("psi_factor only applies to line families"));
            }
        }
        Ok(())
    }

    /// Line bins `m1..m2` for `n` channels.
    pub fn line_bins(&self, n: usize) -> (usize, usize) {
        let m1 = ((self.line_start * n as f64).round() as usize).min(n - 1);
        let w = ((self.line_width * n as f64).round() as usize).max(1);
        (m1, (m1 + w).min(n))
    }

    pub fn psi_factor(&self) -> f64 {
        self.psi_factor.unwrap_or_else(|| self.family.default_psi_factor())
    }

    /// The full factor grid for Type-I error of the power-law null.
    pub fn type1_full(seed: u64) -> Self {
        Self {
            family: Family::PowerLaw,
            gamma: 3.0,
            k_values: vec![0.1, 0.25, 0.5, 1.0, 1.6, 2.5, 5.0, 10.0],
            n_values: vec![10, 25, 50, 100, 200, 300, 400],
            alphas: vec![0.1],
            replications: 3000,
            bootstrap_b: 300,
            seed,
            algorithms: vec![
                Algorithm::LrChi2,
                Algorithm::NaiveZHighorder,
                Algorithm::CorrectedZHigh,
                Algorithm::Bootstrap,
            ],
            line_start: 0.1,
            line_width: 0.1,
            psi_factor: None,
            naive_drop_d: false,
            mean_correction: MeanCorrection::Trace,
        }
    }

    /// Desk-scale version: 2 x 2 grid, M = 2000.
    pub fn type1_desk(seed: u64) -> Self {
        Self {
            k_values: vec![0.25, 1.0],
            n_values: vec![25, 100],
            replications: 2000,
            ..Self::type1_full(seed)
        }
    }

    /// Power against an emission (`Psi = 2K`) or absorption (`Psi = K/10`) line at `n = 100`.
    pub fn power(family: Family, seed: u64) -> Self {
        Self {
            family,
            k_values: vec![0.1, 0.25, 0.5, 1.0, 1.6, 2.5, 5.0, 10.0],
            n_values: vec![100],
            ..Self::type1_full(seed)
        }
    }

    /// Flatter spectrum (`Gamma = 1`) with the line centred at `n/2`.
    pub fn power_gamma1(family: Family, seed: u64) -> Self {
        Self {
            gamma: 1.0,
            line_start: 0.45,
            ..Self::power(family, seed)
        }
    }
}

/// Outcome of a p-value method on one replicate.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodOutcome {
    pub p_value: f64,
    pub reference: Reference,
}

/// The reference distribution behind a p-value, used for critical values.
#[derive(Clone, Debug, PartialEq)]
pub enum Reference {
    None,
    Normal { mean: f64, var: f64 },
    ChiSquared { dof: usize },
    Empirical(Vec<f64>),
}

impl Reference {
    /// Upper `alpha` critical value.
    pub fn critical_value(&self, alpha: f64) -> Option<f64> {
        match self {
            Reference::None => None,
            Reference::Normal { mean, var } => {
                let z = Normal::new(0.0, 1.0).ok()?.inverse_cdf(1.0 - alpha);
                Some(mean + z * var.sqrt())
            }
            Reference::ChiSquared { dof } => Some(ChiSquared::new(*dof as f64).ok()?.inverse_cdf(1.0 - alpha)),
            Reference::Empirical(v) if !v.is_empty() => {
                let mut v = v.clone();
                v.sort_by(f64::total_cmp);
                let k = (((1.0 - alpha) * v.len() as f64).ceil() as usize).clamp(1, v.len());
                Some(v[k - 1])
            }
            Reference::Empirical(_) => None,
        }
    }
}

impl From<&GofResult> for MethodOutcome {
    fn from(g: &GofResult) -> Self {
        let reference = match (g.algorithm, g.ref_mean, g.ref_var, g.dof) {
            (Algorithm::LrChi2, _, _, Some(dof)) => Reference::ChiSquared { dof },
            (Algorithm::Bootstrap, ..) => g
                .boot
                .as_ref()
                .map(|b| Reference::Empirical(b.replicates.clone()))
                .unwrap_or(Reference::None),
            (_, Some(mean), Some(var), _) => Reference::Normal { mean, var },
            _ => Reference::None,
        };
        Self {
            p_value: g.p_value,
            reference,
        }
    }
}

/// One simulated dataset with its null fit.
pub struct Replicate<'a> {
    pub data: &'a BinnedDataset,
    pub model: &'a dyn SpectralModel,
    pub fit: &'a FitResult,
}

/// A p-value procedure the harness can evaluate.
pub trait PValueMethod: Send + Sync {
    fn label(&self) -> String;

    /// `seed` drives any resampling; it is shared by all methods on a replicate.
    fn evaluate(&self, rep: &Replicate<'_>, seed: u64) -> Result<MethodOutcome>;
}

/// A built-in test from [`crate::gof`].
#[derive(Clone, Debug)]
pub struct BuiltinMethod {
    pub algorithm: Algorithm,
    pub source: CumulantSource,
    pub options: GofOptions,
}

impl PValueMethod for BuiltinMethod {
    fn label(&self) -> String {
        self.algorithm.label().to_owned()
    }

    fn evaluate(&self, rep: &Replicate<'_>, seed: u64) -> Result<MethodOutcome> {
        let opts = GofOptions {
            seed: Some(seed),
            ..self.options.clone()
        };
        let g = run_gof(self.algorithm, rep.data, rep.model, rep.fit, &self.source, &opts)?;
        Ok(MethodOutcome::from(&g))
    }
}

pub fn builtin_methods(grid: &ExperimentGrid, source: &CumulantSource) -> Vec<Box<dyn PValueMethod>> {
    grid.algorithms
        .iter()
        .map(|&algorithm| {
            Box::new(BuiltinMethod {
                algorithm,
                source: source.clone(),
                options: GofOptions {
                    b: grid.bootstrap_b,
                    b1: grid.bootstrap_b,
                    b2: grid.bootstrap_b,
                    naive_drop_d: grid.naive_drop_d,
                    mean_correction: grid.mean_correction,
                    ..GofOptions::default()
                },
            }) as Box<dyn PValueMethod>
        })
        .collect()
}

/// Generating and null models for one `(n, K)` cell.
pub struct CellSetup {
    pub template: BinnedDataset,
    pub rates: Vec<f64>,
    pub null_model: Box<dyn SpectralModel>,
    pub truth: Vec<f64>,
}

pub fn cell_setup(grid: &ExperimentGrid, n: usize, k: f64) -> Result<CellSetup> {
    let edges = unit_grid_edges(n);
    let template = BinnedDataset::on_unit_grid(vec![0; n])?;
    let (null_model, truth): (Box<dyn SpectralModel>, Vec<f64>) = match grid.family {
        Family::Constant => (Box::new(Constant::new(n)?), vec![k]),
        _ => (
            Box::new(PowerLaw::on_edges(&edges, EnergyPoint::Upper)?),
            vec![k, grid.gamma],
        ),
    };
    let rates = if grid.family.is_alternative() {
        let (m1, m2) = grid.line_bins(n);
        let alt = PowerLawWithLine::on_edges(&edges, EnergyPoint::Upper, m1, m2)?;
        expected_counts(&alt, &[k, grid.gamma, grid.psi_factor() * k])?
    } else {
        expected_counts(null_model.as_ref(), &truth)?
    };
    Ok(CellSetup {
        template,
        rates,
        null_model,
        truth,
    })
}

fn cell_seed(master: u64, n: usize, k: f64) -> u64 {
    derive_path(master, &[n as u64, k.to_bits()])
}

/// Per-replicate results of one cell.
struct CellRun {
    c_values: Vec<f64>,
    failed_fit_seeds: Vec<u64>,
    // outcomes[method][replicate], `None` when the method failed.
    outcomes: Vec<Vec<Option<MethodOutcome>>>,
}

/// Replicate seed with its fitted C and per-method outcomes, `None` when the fit failed.
type RepOutcome = (u64, Option<(f64, Vec<Option<MethodOutcome>>)>);

fn run_cell(setup: &CellSetup, methods: &[Box<dyn PValueMethod>], m: usize, seed: u64) -> Result<CellRun> {
    let opts = FitOptions::single_start();
    let per_rep: Vec<RepOutcome> = (0..m as u64)
        .into_par_iter()
        .map(|r| {
            let rs = derive_seed(seed, r);
            let data = match setup.template.with_counts(sample_counts(&setup.rates, rs)) {
                Ok(d) => d,
                Err(_) => return (rs, None),
            };
            let fit = match fit_with(&data, setup.null_model.as_ref(), None, &opts) {
                Ok(f) => f,
                Err(_) => return (rs, None),
            };
            let rep = Replicate {
                data: &data,
                model: setup.null_model.as_ref(),
                fit: &fit,
            };
            let boot_seed = derive_seed(rs, 1);
            let outs = methods.iter().map(|meth| meth.evaluate(&rep, boot_seed).ok()).collect();
            (rs, Some((fit.c_min, outs)))
        })
        .collect();
    let mut run = CellRun {
        c_values: Vec::with_capacity(m),
        failed_fit_seeds: Vec::new(),
        outcomes: vec![Vec::with_capacity(m); methods.len()],
    };
    for (rs, r) in per_rep {
        match r {
            Some((c, outs)) => {
                run.c_values.push(c);
                for (k, o) in outs.into_iter().enumerate() {
                    run.outcomes[k].push(o);
                }
            }
            None => run.failed_fit_seeds.push(rs),
        }
    }
    Ok(run)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub algorithm: String,
    pub n: usize,
    #[serde(rename = "K")]
    pub k: f64,
    pub alpha: f64,
    pub metric: Metric,
    pub value: f64,
    pub se: f64,
    /// Mean over replicates of the upper-alpha critical value.
    pub critical_value: Option<f64>,
    /// Replicates with a usable p-value.
    pub m_used: usize,
    /// Replicates lost to fit or method failures.
    pub failures: usize,
    /// More than 1% of replicates failed.
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullSample {
    pub n: usize,
    #[serde(rename = "K")]
    pub k: f64,
    pub values: Vec<f64>,
    pub failed_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub grid: ExperimentGrid,
    pub records: Vec<CellRecord>,
    pub samples: Vec<NullSample>,
}

/// Share of failures above which a cell is flagged.
pub const FLAG_SHARE: f64 = 0.01;

pub fn standard_error(rate: f64, m: usize) -> f64 {
    if m == 0 {
        f64::NAN
    } else {
        (rate * (1.0 - rate) / m as f64).sqrt()
    }
}

/// Rejection rates of every method in every `(n, K, alpha)` cell.
pub fn run_grid(grid: &ExperimentGrid, methods: &[Box<dyn PValueMethod>]) -> Result<CalibrationReport> {
    grid.validate()?;
    if methods.is_empty() {
        return Err(Error::invalid("no methods to evaluate"));
    }
    let metric = if grid.family.is_alternative() {
        Metric::Power
    } else {
        Metric::Type1
    };
    let mut records = Vec::new();
    let mut samples = Vec::new();
    let mut ns = grid.n_values.clone();
    ns.sort_unstable();
    ns.dedup();
    let mut ks = grid.k_values.clone();
    ks.sort_by(f64::total_cmp);
    ks.dedup();
    for &n in &ns {
        for &k in &ks {
            let setup = cell_setup(grid, n, k)?;
            let run = run_cell(&setup, methods, grid.replications, cell_seed(grid.seed, n, k))?;
            let fit_failures = run.failed_fit_seeds.len();
            if fit_failures as f64 > FLAG_SHARE * grid.replications as f64 {
                log::warn!(
                    "cell n={n} K={k}: {fit_failures} of {} fits failed (seeds {:?})",
                    grid.replications,
                    run.failed_fit_seeds
                );
            }
            for (mi, meth) in methods.iter().enumerate() {
                let ok: Vec<&MethodOutcome> = run.outcomes[mi].iter().flatten().collect();
                let failures = grid.replications - ok.len();
                for &alpha in &grid.alphas {
                    let rejected = ok.iter().filter(|o| o.p_value <= alpha).count();
                    let m_used = ok.len();
                    let value = if m_used == 0 {
                        f64::NAN
                    } else {
                        rejected as f64 / m_used as f64
                    };
                    let crit: Vec<f64> = ok.iter().filter_map(|o| o.reference.critical_value(alpha)).collect();
                    records.push(CellRecord {
                        algorithm: meth.label(),
                        n,
                        k,
                        alpha,
                        metric,
                        value,
                        se: standard_error(value, m_used),
                        critical_value: (!crit.is_empty()).then(|| crit.iter().sum::<f64>() / crit.len() as f64),
                        m_used,
                        failures,
                        flagged: failures as f64 > FLAG_SHARE * grid.replications as f64,
                    });
                }
            }
            samples.push(NullSample {
                n,
                k,
                values: run.c_values,
                failed_seeds: run.failed_fit_seeds,
            });
        }
    }
    Ok(CalibrationReport {
        grid: grid.clone(),
        records,
        samples,
    })
}

pub fn type1_curve(grid: &ExperimentGrid, methods: &[Box<dyn PValueMethod>]) -> Result<CalibrationReport> {
    if grid.family.is_alternative() {
        return Err(Error::invalid(
            "Type-I error needs a null family (constant or powerlaw)",
        ));
    }
    run_grid(grid, methods)
}

pub fn power_curve(grid: &ExperimentGrid, methods: &[Box<dyn PValueMethod>]) -> Result<CalibrationReport> {
    if !grid.family.is_alternative() {
        return Err(Error::invalid("power needs a line family (emission or absorption)"));
    }
    run_grid(grid, methods)
}

/// `m` values of `C(theta_hat)` for one cell, simulated and fitted as in [`run_grid`].
pub fn null_histogram(grid: &ExperimentGrid, n: usize, k: f64, m: usize, seed: u64) -> Result<NullSample> {
    let setup = cell_setup(grid, n, k)?;
    let run = run_cell(&setup, &[], m, seed)?;
    if run.failed_fit_seeds.len() as f64 > FLAG_SHARE * m as f64 {
        log::warn!("null sample: {} of {m} fits failed", run.failed_fit_seeds.len());
    }
    Ok(NullSample {
        n,
        k,
        values: run.c_values,
        failed_seeds: run.failed_fit_seeds,
    })
}

impl CalibrationReport {
    /// Tidy CSV `algorithm,n,K,alpha,metric,value,se`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["algorithm", "n", "K", "alpha", "metric", "value", "se"])?;
        for r in &self.records {
            let metric = match r.metric {
                Metric::Type1 => "type1",
                Metric::Power => "power",
            };
            wtr.write_record([
                r.algorithm.clone(),
                r.n.to_string(),
                r.k.to_string(),
                r.alpha.to_string(),
                metric.to_owned(),
                r.value.to_string(),
                r.se.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn record(&self, algorithm: &str, n: usize, k: f64, alpha: f64) -> Option<&CellRecord> {
        self.records
            .iter()
            .find(|r| r.algorithm == algorithm && r.n == n && r.k == k && r.alpha == alpha)
    }
}

/// Response presets for the sensitivity study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RmfCase {
    Identity,
    Tridiagonal,
    Dispersed,
    AllOnes,
}

impl RmfCase {
    pub fn response(self, edges: &[f64]) -> Result<InstrumentResponse> {
        match self {
            RmfCase::Identity => InstrumentResponse::identity(edges),
            RmfCase::Tridiagonal => InstrumentResponse::tridiagonal(edges),
            RmfCase::Dispersed => InstrumentResponse::dispersed(edges),
            RmfCase::AllOnes => InstrumentResponse::uniform(edges),
        }
    }
}

pub const RMF_STUDY_BINS: usize = 50;
pub const RMF_STUDY_BACKGROUND: f64 = 0.1;
pub const RMF_STUDY_GAMMA: f64 = 3.0;

/// Folded power law of the sensitivity study: `n = 50`, unit area, background 0.1.
/// `None` gives the same model without redistribution.
pub fn rmf_study_model(case: Option<RmfCase>) -> Result<Box<dyn SpectralModel>> {
    let n = RMF_STUDY_BINS;
    let edges = unit_grid_edges(n);
    let continuum = Box::new(PowerLaw::on_edges(&edges, EnergyPoint::Mid)?);
    let bg = Some(vec![RMF_STUDY_BACKGROUND; n]);
    Ok(match case {
        Some(c) => Box::new(FoldedModel::new(continuum, &c.response(&edges)?, bg, 1.0)?),
        None => Box::new(FoldedModel::unfolded(continuum, &vec![1.0; n], &edges, bg, 1.0)?),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmfStudy {
    pub case: RmfCase,
    pub k_over_n: f64,
    /// `C(theta_hat)` with the response applied.
    pub with_rmf: Vec<f64>,
    /// `C(theta_hat)` on data from the same seeds without redistribution.
    pub without_rmf: Vec<f64>,
    pub failed_seeds: Vec<u64>,
}

/// Paired null samples with and without the response, sharing seeds replicate by replicate.
pub fn rmf_case_study(case: RmfCase, k_over_n: f64, m: usize, seed: u64) -> Result<RmfStudy> {
    if !(k_over_n > 0.0) || m == 0 {
        return Err(Error::invalid("k_over_n must be positive and m >= 1"));
    }
    let n = RMF_STUDY_BINS;
    let truth = [k_over_n * n as f64, RMF_STUDY_GAMMA];
    let with_model = rmf_study_model(Some(case))?;
    let without_model = rmf_study_model(None)?;
    let template = BinnedDataset::on_unit_grid(vec![0; n])?;
    let s_with = expected_counts(with_model.as_ref(), &truth)?;
    let s_without = expected_counts(without_model.as_ref(), &truth)?;
    let opts = FitOptions::single_start();
    let fit_c = |model: &dyn SpectralModel, rates: &[f64], rs: u64| -> Option<f64> {
        let data = template.with_counts(sample_counts(rates, rs)).ok()?;
        fit_with(&data, model, Some(&truth), &opts).ok().map(|f| f.c_min)
    };
    let pairs: Vec<(u64, Option<(f64, f64)>)> = (0..m as u64)
        .into_par_iter()
        .map(|r| {
            let rs = derive_seed(seed, r);
            let a = fit_c(with_model.as_ref(), &s_with, rs);
            let b = fit_c(without_model.as_ref(), &s_without, rs);
            (rs, a.zip(b))
        })
        .collect();
    let mut out = RmfStudy {
        case,
        k_over_n,
        with_rmf: Vec::with_capacity(m),
        without_rmf: Vec::with_capacity(m),
        failed_seeds: Vec::new(),
    };
    for (rs, p) in pairs {
        match p {
            Some((a, b)) => {
                out.with_rmf.push(a);
                out.without_rmf.push(b);
            }
            None => out.failed_seeds.push(rs),
        }
    }
    if out.failed_seeds.len() as f64 > FLAG_SHARE * m as f64 {
        log::warn!(
            "response study: {} of {m} replicate pairs failed",
            out.failed_seeds.len()
        );
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub bootstrap_b: usize,
    pub repetitions: usize,
    /// Mean seconds per call of fit + corrected Z-test.
    pub corrected_z_secs: f64,
    /// Mean seconds per call of fit + parametric bootstrap.
    pub bootstrap_secs: f64,
}

/// Time the corrected Z-test against the parametric bootstrap on the
/// tridiagonal-response power law with `K = n`, on a single worker thread.
pub fn runtime_bench(
    n_values: &[usize],
    b: usize,
    repetitions: usize,
    seed: u64,
    source: &CumulantSource,
) -> Result<Vec<BenchRow>> {
    if repetitions == 0 || b == 0 {
        return Err(Error::invalid("repetitions and B must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::invalid(e.to_string()))?;
    let source = Arc::new(source.clone());
    pool.install(|| {
        n_values
            .iter()
            .map(|&n| {
                let edges = unit_grid_edges(n);
                let continuum = Box::new(PowerLaw::on_edges(&edges, EnergyPoint::Mid)?);
                let resp = InstrumentResponse::tridiagonal(&edges)?;
                let model = FoldedModel::new(continuum, &resp, Some(vec![RMF_STUDY_BACKGROUND; n]), 1.0)?;
                let truth = [n as f64, RMF_STUDY_GAMMA];
                let rates = expected_counts(&model, &truth)?;
                let template = BinnedDataset::on_unit_grid(vec![0; n])?;
                let (mut t_z, mut t_b) = (0.0, 0.0);
                for r in 0..repetitions as u64 {
                    let rs = derive_path(seed, &[n as u64, r]);
                    let data = template.with_counts(sample_counts(&rates, rs))?;

                    let start = Instant::now();
                    let fit = crate::fit::fit_mle(&data, &model, None)?;
                    run_gof(
                        Algorithm::CorrectedZHigh,
                        &data,
                        &model,
                        &fit,
                        &source,
                        &GofOptions::default(),
                    )?;
                    t_z += start.elapsed().as_secs_f64();

                    let start = Instant::now();
                    let fit = crate::fit::fit_mle(&data, &model, None)?;
                    let opts = GofOptions {
                        b,
                        seed: Some(derive_seed(rs, 1)),
                        ..GofOptions::default()
                    };
                    run_gof(Algorithm::Bootstrap, &data, &model, &fit, &source, &opts)?;
                    t_b += start.elapsed().as_secs_f64();
                }
                Ok(BenchRow {
                    n,
                    bootstrap_b: b,
                    repetitions,
                    corrected_z_secs: t_z / repetitions as f64,
                    bootstrap_secs: t_b / repetitions as f64,
                })
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct UniformOracle;

    impl PValueMethod for UniformOracle {
        fn label(&self) -> String {
            "oracle".into()
        }

        fn evaluate(&self, _rep: &Replicate<'_>, seed: u64) -> Result<MethodOutcome> {
            Ok(MethodOutcome {
                p_value: (derive_seed(seed, 99) >> 11) as f64 / (1u64 << 53) as f64,
                reference: Reference::None,
            })
        }
    }

    fn small_grid() -> ExperimentGrid {
        ExperimentGrid {
            k_values: vec![2.0],
            n_values: vec![20],
            replications: 400,
            alphas: vec![0.05, 0.1, 0.5],
            ..ExperimentGrid::type1_desk(7)
        }
    }

    #[test]
    fn oracle_rates_match_alpha() {
        let grid = small_grid();
        let rep = run_grid(&grid, &[Box::new(UniformOracle)]).unwrap();
        assert_eq!(rep.records.len(), 3);
        for r in &rep.records {
            assert!(
                (r.value - r.alpha).abs() <= 3.0 * standard_error(r.alpha, r.m_used) + 1e-12,
                "{r:?}"
            );
            assert_eq!(r.se, (r.value * (1.0 - r.value) / r.m_used as f64).sqrt());
        }
    }

    #[test]
    fn every_cell_once_and_reproducible() {
        let mut grid = small_grid();
        grid.replications = 30;
        grid.n_values = vec![10, 15];
        grid.k_values = vec![1.0, 3.0];
        grid.algorithms = vec![Algorithm::LrChi2, Algorithm::CorrectedZHigh];
        let methods = builtin_methods(&grid, &CumulantSource::direct());
        let a = run_grid(&grid, &methods).unwrap();
        assert_eq!(a.records.len(), 2 * 2 * 2 * 3);
        for alg in ["lr-chi2", "corrected-z-high"] {
            for n in [10, 15] {
                for k in [1.0, 3.0] {
                    for alpha in [0.05, 0.1, 0.5] {
                        assert!(a.record(alg, n, k, alpha).is_some());
                    }
                }
            }
        }
        let b = run_grid(&grid, &methods).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_replicate_matches_scripted_run() {
        let grid = small_grid();
        let s = null_histogram(&grid, 20, 2.0, 1, 123).unwrap();
        let setup = cell_setup(&grid, 20, 2.0).unwrap();
        let data = setup
            .template
            .with_counts(sample_counts(&setup.rates, derive_seed(123, 0)))
            .unwrap();
        let fit = fit_with(&data, setup.null_model.as_ref(), None, &FitOptions::single_start()).unwrap();
        assert_eq!(s.values, vec![fit.c_min]);
    }

    #[test]
    fn critical_values() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(Reference::Empirical(v).critical_value(0.1), Some(90.0));
        let n = Reference::Normal { mean: 10.0, var: 4.0 }.critical_value(0.05).unwrap();
        assert!((n - (10.0 + 2.0 * 1.644_853_626_951)).abs() < 1e-9);
    }

    #[test]
    fn grid_validation() {
        let mut g = small_grid();
        g.replications = 0;
        assert!(g.validate().is_err());
        let mut g = small_grid();
        g.psi_factor = Some(2.0);
        assert!(g.validate().is_err());
        let g = ExperimentGrid::power(Family::Emission, 1);
        assert_eq!(g.line_bins(100), (10, 20));
        assert_eq!(g.psi_factor(), 2.0);
        assert_eq!(ExperimentGrid::power(Family::Absorption, 1).psi_factor(), 0.1);
    }

    #[test]
    fn grid_json_rejects_unknown_fields() {
        let g = small_grid();
        let text = serde_json::to_string(&g).unwrap();
        let back: ExperimentGrid = serde_json::from_str(&text).unwrap();
        assert_eq!(back, g);
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ExperimentGrid>(v).is_err());
    }

    #[test]
    fn identity_case_pairs_are_equal() {
        let st = rmf_case_study(RmfCase::Identity, 10.0, 20, 3).unwrap();
        assert_eq!(st.with_rmf, st.without_rmf);
        assert_eq!(st.with_rmf.len(), 20);
    }

    #[test]
    fn all_ones_response_gives_flat_rates() {
        let m = rmf_study_model(Some(RmfCase::AllOnes)).unwrap();
        let s = expected_counts(m.as_ref(), &[500.0, 3.0]).unwrap();
        assert!(s.iter().all(|v| (v - s[0]).abs() < 1e-12 * s[0]));
    }
}
