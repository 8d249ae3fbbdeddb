//! Parametric expected-count models `theta -> s(theta)` with analytic Jacobians.

use std::collections::BTreeMap;
use std::fmt::Debug;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::BinnedDataset;
use crate::error::{Error, Result};
use crate::response::InstrumentResponse;

/// Positivity floor for expected counts.
pub const EPS_FLOOR: f64 = 1e-10;
/// Upper bound used for positive (log-domain) parameters.
pub const POSITIVE_UPPER: f64 = 1e15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    Identity,
    Log,
}

impl Transform {
    #[inline]
    pub fn forward(self, theta: f64) -> f64 {
        match self {
            Transform::Identity => theta,
            Transform::Log => theta.ln(),
        }
    }

    #[inline]
    pub fn inverse(self, u: f64) -> f64 {
        match self {
            Transform::Identity => u,
            Transform::Log => u.exp(),
        }
    }

    /// `d theta / d u` at `theta`.
    #[inline]
    pub fn jacobian(self, theta: f64) -> f64 {
        match self {
            Transform::Identity => 1.0,
            Transform::Log => theta,
        }
    }
}

/// Name, open bounds and optimisation transform of one parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub transform: Transform,
}

impl ParamSpec {
    pub fn positive(name: &str) -> Self {
        Self {
            name: name.to_owned(),
            lower: EPS_FLOOR,
            upper: POSITIVE_UPPER,
            transform: Transform::Log,
        }
    }

    pub fn real(name: &str, lower: f64, upper: f64) -> Self {
        Self {
            name: name.to_owned(),
            lower,
            upper,
            transform: Transform::Identity,
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v > self.lower && v < self.upper
    }

    /// Clamp into the open interval, keeping a small relative margin.
    pub fn clamp(&self, v: f64) -> f64 {
        let (lo, hi) = self.inner_bounds();
        if v.is_nan() {
            return 0.5 * (lo + hi);
        }
        v.clamp(lo, hi)
    }

    fn inner_bounds(&self) -> (f64, f64) {
        match self.transform {
            Transform::Log => (self.lower * (1.0 + 1e-9), self.upper * (1.0 - 1e-9)),
            Transform::Identity => {
                let m = 1e-9 * (self.upper - self.lower).abs().min(1.0);
                (self.lower + m, self.upper - m)
            }
        }
    }
}

/// Parameter values together with their names, bounds and transforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterVector {
    pub names: Vec<String>,
    pub values: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub transforms: Vec<Transform>,
}

impl ParameterVector {
    pub fn new(specs: &[ParamSpec], values: Vec<f64>) -> Result<Self> {
        if specs.len() != values.len() {
            return Err(Error::LengthMismatch {
                expected: specs.len(),
                found: values.len(),
            });
        }
        check_bounds(specs, &values)?;
        Ok(Self {
            names: specs.iter().map(|p| p.name.clone()).collect(),
            values,
            lower: specs.iter().map(|p| p.lower).collect(),
            upper: specs.iter().map(|p| p.upper).collect(),
            transforms: specs.iter().map(|p| p.transform).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|k| self.values[k])
    }
}

pub fn check_bounds(specs: &[ParamSpec], theta: &[f64]) -> Result<()> {
    if specs.len() != theta.len() {
        return Err(Error::LengthMismatch {
            expected: specs.len(),
            found: theta.len(),
        });
    }
    for (p, &v) in specs.iter().zip(theta) {
        if !p.contains(v) {
            return Err(Error::OutOfBounds {
                name: p.name.clone(),
                value: v,
                lower: p.lower,
                upper: p.upper,
            });
        }
    }
    Ok(())
}

/// A parametric map from `theta` to positive expected counts.
///
/// `eval_into` and `jacobian_into` receive in-bounds parameters and must not
/// allocate on the hot path where avoidable; flooring is applied by the caller.
pub trait SpectralModel: Send + Sync + Debug {
    fn name(&self) -> &str;

    fn n_bins(&self) -> usize;

    fn params(&self) -> &[ParamSpec];

    fn n_params(&self) -> usize {
        self.params().len()
    }

    /// Unfloored expected counts.
    fn eval_into(&self, theta: &[f64], s: &mut [f64]);

    /// `n x d` Jacobian, row `i` equal to `grad s_i`.
    fn jacobian_into(&self, theta: &[f64], x: &mut DMatrix<f64>);

    /// Parameters roughly matching positive per-bin levels (approximate expected counts).
    fn guess_from_levels(&self, levels: &[f64]) -> Vec<f64>;

    /// Starting point for fitting `data`.
    fn initial_guess(&self, data: &BinnedDataset) -> Vec<f64> {
        let levels: Vec<f64> = data.counts().iter().map(|&n| n as f64 + 0.5).collect();
        self.guess_from_levels(&levels)
    }

    /// Design matrix `X~` when `log s = X~ theta`.
    fn log_linear_design(&self) -> Option<DMatrix<f64>> {
        None
    }
}

/// What to do when a model produces an expected count below [`EPS_FLOOR`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FloorPolicy {
    #[default]
    Clamp,
    Error,
}

/// Floored expected counts and the bins where the floor was applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub s: Vec<f64>,
    pub clamped: Vec<usize>,
}

/// Apply the floor in place; returns the indices that were raised.
pub(crate) fn apply_floor(s: &mut [f64]) -> Vec<usize> {
    let mut clamped = Vec::new();
    for (i, v) in s.iter_mut().enumerate() {
        if !(*v >= EPS_FLOOR) {
            *v = EPS_FLOOR;
            clamped.push(i);
        }
    }
    clamped
}

pub fn evaluate(model: &dyn SpectralModel, theta: &[f64], policy: FloorPolicy) -> Result<Evaluation> {
    check_bounds(model.params(), theta)?;
    let mut s = vec![0.0; model.n_bins()];
    model.eval_into(theta, &mut s);
    if let Some(i) = s.iter().position(|v| v.is_nan() || v.is_infinite()) {
        return Err(Error::ModelViolation { bin: i, value: s[i] });
    }
    if policy == FloorPolicy::Error {
        if let Some(i) = s.iter().position(|v| *v < EPS_FLOOR) {
            return Err(Error::ModelViolation { bin: i, value: s[i] });
        }
    }
    let clamped = apply_floor(&mut s);
    if !clamped.is_empty() {
        log::warn!(
            "{}: {} expected count(s) raised to the floor {EPS_FLOOR:e} (first bin {})",
            model.name(),
            clamped.len(),
            clamped[0]
        );
    }
    Ok(Evaluation { s, clamped })
}

/// Expected counts with floor clamping.
pub fn expected_counts(model: &dyn SpectralModel, theta: &[f64]) -> Result<Vec<f64>> {
    evaluate(model, theta, FloorPolicy::Clamp).map(|e| e.s)
}

pub fn gradient_expected_counts(model: &dyn SpectralModel, theta: &[f64]) -> Result<DMatrix<f64>> {
    check_bounds(model.params(), theta)?;
    let mut x = DMatrix::zeros(model.n_bins(), model.n_params());
    model.jacobian_into(theta, &mut x);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("model Jacobian is not finite"));
    }
    Ok(x)
}

fn clamp_all(specs: &[ParamSpec], theta: Vec<f64>) -> Vec<f64> {
    theta.into_iter().zip(specs).map(|(v, p)| p.clamp(v)).collect()
}

/// Which point of a channel stands for its energy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergyPoint {
    #[default]
    Upper,
    Mid,
    Lower,
}

pub fn channel_energies(edges: &[f64], point: EnergyPoint) -> Vec<f64> {
    edges
        .windows(2)
        .map(|w| match point {
            EnergyPoint::Upper => w[1],
            EnergyPoint::Mid => 0.5 * (w[0] + w[1]),
            EnergyPoint::Lower => w[0],
        })
        .collect()
}

/// `s_i = theta`.
#[derive(Clone, Debug)]
pub struct Constant {
    n: usize,
    specs: Vec<ParamSpec>,
}

impl Constant {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::domain("model needs at least one bin"));
        }
        Ok(Self {
            n,
            specs: vec![ParamSpec::positive("theta")],
        })
    }
}

impl SpectralModel for Constant {
    fn name(&self) -> &str {
        "constant"
    }

    fn n_bins(&self) -> usize {
        self.n
    }

    fn params(&self) -> &[ParamSpec] {
        &self.specs
    }

    fn eval_into(&self, theta: &[f64], s: &mut [f64]) {
        s.fill(theta[0]);
    }

    fn jacobian_into(&self, _theta: &[f64], x: &mut DMatrix<f64>) {
        x.fill(1.0);
    }

    fn guess_from_levels(&self, levels: &[f64]) -> Vec<f64> {
        let mean = levels.iter().sum::<f64>() / levels.len() as f64;
        clamp_all(&self.specs, vec![mean])
    }

    fn initial_guess(&self, data: &BinnedDataset) -> Vec<f64> {
        let mean = data.total_counts() as f64 / data.len() as f64;
        clamp_all(&self.specs, vec![mean.max(1e-3)])
    }
}

/// `s_i = K E_i^{-Gamma}`.
#[derive(Clone, Debug)]
pub struct PowerLaw {
    ln_e: Vec<f64>,
    specs: Vec<ParamSpec>,
}

impl PowerLaw {
    pub fn new(energies: &[f64]) -> Result<Self> {
        if energies.is_empty() {
            return Err(Error::domain("model needs at least one bin"));
        }
        if energies.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(Error::domain("power-law energies must be positive"));
        }
        Ok(Self {
            ln_e: energies.iter().map(|e| e.ln()).collect(),
            specs: vec![ParamSpec::positive("K"), ParamSpec::real("Gamma", -50.0, 50.0)],
        })
    }

    pub fn on_edges(edges: &[f64], point: EnergyPoint) -> Result<Self> {
        Self::new(&channel_energies(edges, point))
    }

    fn fit_levels(&self, levels: &[f64]) -> (f64, f64) {
        let n = levels.len() as f64;
        let ys: Vec<f64> = levels.iter().map(|l| l.max(1e-300).ln()).collect();
        let mx = self.ln_e.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let (mut sxx, mut sxy) = (0.0, 0.0);
        for (x, y) in self.ln_e.iter().zip(&ys) {
            sxx += (x - mx) * (x - mx);
            sxy += (x - mx) * (y - my);
        }
        let slope = if sxx > 1e-300 { sxy / sxx } else { 0.0 };
        let ln_k = my - slope * mx;
        (ln_k.exp(), -slope)
    }
}

impl SpectralModel for PowerLaw {
    fn name(&self) -> &str {
        "powerlaw"
    }

    fn n_bins(&self) -> usize {
        self.ln_e.len()
    }

    fn params(&self) -> &[ParamSpec] {
        &self.specs
    }

    fn eval_into(&self, theta: &[f64], s: &mut [f64]) {
        let (k, g) = (theta[0], theta[1]);
        for (si, le) in s.iter_mut().zip(&self.ln_e) {
            *si = k * (-g * le).exp();
        }
    }

    fn jacobian_into(&self, theta: &[f64], x: &mut DMatrix<f64>) {
        let (k, g) = (theta[0], theta[1]);
        for (i, le) in self.ln_e.iter().enumerate() {
            let e = (-g * le).exp();
            x[(i, 0)] = e;
            x[(i, 1)] = -k * e * le;
        }
    }

    fn guess_from_levels(&self, levels: &[f64]) -> Vec<f64> {
        let (k, g) = self.fit_levels(levels);
        clamp_all(&self.specs, vec![k, g])
    }
}

/// Power law whose bins `m1..m2` (zero-based, half-open) are replaced by a flat level `Psi`.
#[derive(Clone, Debug)]
pub struct PowerLawWithLine {
    base: PowerLaw,
    m1: usize,
    m2: usize,
    specs: Vec<ParamSpec>,
}

impl PowerLawWithLine {
    pub fn new(energies: &[f64], m1: usize, m2: usize) -> Result<Self> {
        let base = PowerLaw::new(energies)?;
        if !(m1 < m2 && m2 <= energies.len()) {
            return Err(Error::domain(format!(
                "line bins {m1}..{m2} must be a non-empty range within 0..{}",
                energies.len()
            )));
        }
        let mut specs = base.specs.clone();
        specs.push(ParamSpec::positive("Psi"));
        Ok(Self { base, m1, m2, specs })
    }

    pub fn on_edges(edges: &[f64], point: EnergyPoint, m1: usize, m2: usize) -> Result<Self> {
        Self::new(&channel_energies(edges, point), m1, m2)
    }

    pub fn line_bins(&self) -> std::ops::Range<usize> {
        self.m1..self.m2
    }
}

impl SpectralModel for PowerLawWithLine {
    fn name(&self) -> &str {
        "powerlaw+line"
    }

    fn n_bins(&self) -> usize {
        self.base.n_bins()
    }

    fn params(&self) -> &[ParamSpec] {
        &self.specs
    }

    fn eval_into(&self, theta: &[f64], s: &mut [f64]) {
        self.base.eval_into(&theta[..2], s);
        s[self.m1..self.m2].fill(theta[2]);
    }

    fn jacobian_into(&self, theta: &[f64], x: &mut DMatrix<f64>) {
        let (k, g) = (theta[0], theta[1]);
        for (i, le) in self.base.ln_e.iter().enumerate() {
            if (self.m1..self.m2).contains(&i) {
                x[(i, 0)] = 0.0;
                x[(i, 1)] = 0.0;
                x[(i, 2)] = 1.0;
            } else {
                let e = (-g * le).exp();
                x[(i, 0)] = e;
                x[(i, 1)] = -k * e * le;
                x[(i, 2)] = 0.0;
            }
        }
    }

    fn guess_from_levels(&self, levels: &[f64]) -> Vec<f64> {
        let outside: Vec<usize> = (0..levels.len()).filter(|i| !(self.m1..self.m2).contains(i)).collect();
        let (k, g) = if outside.len() >= 2 {
            let sub = PowerLaw {
                ln_e: outside.iter().map(|&i| self.base.ln_e[i]).collect(),
                specs: self.base.specs.clone(),
            };
            sub.fit_levels(&outside.iter().map(|&i| levels[i]).collect::<Vec<_>>())
        } else {
            self.base.fit_levels(levels)
        };
        let line = &levels[self.m1..self.m2];
        let psi = line.iter().sum::<f64>() / line.len() as f64;
        clamp_all(&self.specs, vec![k, g, psi.max(1e-3)])
    }

    fn initial_guess(&self, data: &BinnedDataset) -> Vec<f64> {
        let levels: Vec<f64> = data.counts().iter().map(|&n| n as f64 + 0.5).collect();
        let mut theta = self.guess_from_levels(&levels);
        let line = &data.counts()[self.m1..self.m2];
        let psi = line.iter().sum::<u64>() as f64 / line.len() as f64;
        theta[2] = self.specs[2].clamp(psi.max(1e-3));
        theta
    }
}

/// `log s_i = x_i^T beta` for a fixed design matrix.
#[derive(Clone, Debug)]
pub struct LogLinear {
    design: DMatrix<f64>,
    specs: Vec<ParamSpec>,
}

impl LogLinear {
    pub fn new(design: DMatrix<f64>) -> Result<Self> {
        if design.nrows() == 0 || design.ncols() == 0 {
            return Err(Error::domain("design matrix must be non-empty"));
        }
        if design.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("design matrix must be finite"));
        }
        let specs = (0..design.ncols())
            .map(|k| ParamSpec::real(&format!("beta{k}"), -100.0, 100.0))
            .collect();
        Ok(Self { design, specs })
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }
}

impl SpectralModel for LogLinear {
    fn name(&self) -> &str {
        "loglinear"
    }

    fn n_bins(&self) -> usize {
        self.design.nrows()
    }

    fn params(&self) -> &[ParamSpec] {
        &self.specs
    }

    fn eval_into(&self, theta: &[f64], s: &mut [f64]) {
        for (i, si) in s.iter_mut().enumerate() {
            let eta: f64 = self.design.row(i).iter().zip(theta).map(|(x, b)| x * b).sum();
            *si = eta.exp();
        }
    }

    fn jacobian_into(&self, theta: &[f64], x: &mut DMatrix<f64>) {
        for i in 0..self.design.nrows() {
            let eta: f64 = self.design.row(i).iter().zip(theta).map(|(x, b)| x * b).sum();
            let s = eta.exp();
            for k in 0..self.design.ncols() {
                x[(i, k)] = s * self.design[(i, k)];
            }
        }
    }

    fn guess_from_levels(&self, levels: &[f64]) -> Vec<f64> {
        let y = DVector::from_iterator(levels.len(), levels.iter().map(|l| l.max(1e-300).ln()));
        let beta = self
            .design
            .clone()
            .svd(true, true)
            .solve(&y, 1e-12)
            .map(|b| b.iter().copied().collect())
            .unwrap_or_else(|_| vec![0.0; self.design.ncols()]);
        clamp_all(&self.specs, beta)
    }

    fn log_linear_design(&self) -> Option<DMatrix<f64>> {
        Some(self.design.clone())
    }
}

/// A continuum on model bins pushed through an instrument response:
/// `s_i = T (sum_j R_ji A_j g_j(theta) w_j + B_i)`.
#[derive(Debug)]
pub struct FoldedModel {
    continuum: Box<dyn SpectralModel>,
    // Per channel, the non-zero `(j, R_ji A_j w_j)` pairs.
    columns: Vec<Vec<(usize, f64)>>,
    background: Vec<f64>,
    exposure: f64,
    name: String,
}

impl FoldedModel {
    pub fn new(
        continuum: Box<dyn SpectralModel>,
        response: &InstrumentResponse,
        background: Option<Vec<f64>>,
        exposure: f64,
    ) -> Result<Self> {
        let j = response.n_model_bins();
        let n = response.n_channels();
        if continuum.n_bins() != j {
            return Err(Error::LengthMismatch {
                expected: j,
                found: continuum.n_bins(),
            });
        }
        let widths = response.model_widths();
        let columns = (0..n)
            .map(|i| {
                (0..j)
                    .filter_map(|jj| {
                        let r = response.rmf()[(jj, i)];
                        let c = r * response.area()[jj] * widths[jj];
                        (c != 0.0).then_some((jj, c))
                    })
                    .collect()
            })
            .collect();
        Self::assemble(continuum, columns, n, background, exposure)
    }

    /// No redistribution: channel `i` sees model bin `i` only.
    pub fn unfolded(
        continuum: Box<dyn SpectralModel>,
        area: &[f64],
        model_edges: &[f64],
        background: Option<Vec<f64>>,
        exposure: f64,
    ) -> Result<Self> {
        let n = continuum.n_bins();
        if area.len() != n || model_edges.len() != n + 1 {
            return Err(Error::LengthMismatch {
                expected: n,
                found: area.len(),
            });
        }
        let columns = (0..n)
            .map(|i| {
                let c = area[i] * (model_edges[i + 1] - model_edges[i]);
                if c != 0.0 {
                    vec![(i, c)]
                } else {
                    Vec::new()
                }
            })
            .collect();
        Self::assemble(continuum, columns, n, background, exposure)
    }

    fn assemble(
        continuum: Box<dyn SpectralModel>,
        columns: Vec<Vec<(usize, f64)>>,
        n: usize,
        background: Option<Vec<f64>>,
        exposure: f64,
    ) -> Result<Self> {
        if !(exposure.is_finite() && exposure > 0.0) {
            return Err(Error::domain(format!("exposure must be positive, got {exposure}")));
        }
        let background = background.unwrap_or_else(|| vec![0.0; n]);
        if background.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                found: background.len(),
            });
        }
        let name = format!("folded({})", continuum.name());
        Ok(Self {
            continuum,
            columns,
            background,
            exposure,
            name,
        })
    }

    pub fn continuum(&self) -> &dyn SpectralModel {
        self.continuum.as_ref()
    }

    fn levels(&self, counts: &[f64]) -> Vec<f64> {
        // Crude deconvolution: spread each channel's source counts back over its
        // contributing model bins in proportion to their weights.
        let j = self.continuum.n_bins();
        let mut num = vec![0.0; j];
        let mut den = vec![0.0; j];
        for (i, col) in self.columns.iter().enumerate() {
            let total: f64 = col.iter().map(|(_, c)| c).sum();
            if total <= 0.0 {
                continue;
            }
            let src = (counts[i] / self.exposure - self.background[i]).max(0.0);
            for &(jj, c) in col {
                num[jj] += src * c / total;
                den[jj] += c;
            }
        }
        let mut levels: Vec<f64> = num
            .iter()
            .zip(&den)
            .map(|(a, b)| if *b > 0.0 { a / b } else { 0.0 })
            .collect();
        let positive: Vec<f64> = levels.iter().copied().filter(|v| *v > 0.0).collect();
        let fill = if positive.is_empty() {
            1e-3
        } else {
            positive.iter().copied().fold(f64::INFINITY, f64::min)
        };
        for v in levels.iter_mut() {
            if *v <= 0.0 {
                *v = fill;
            }
        }
        levels
    }
}

impl SpectralModel for FoldedModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn n_bins(&self) -> usize {
        self.columns.len()
    }

    fn params(&self) -> &[ParamSpec] {
        self.continuum.params()
    }

    fn eval_into(&self, theta: &[f64], s: &mut [f64]) {
        let mut g = vec![0.0; self.continuum.n_bins()];
        self.continuum.eval_into(theta, &mut g);
        for (i, col) in self.columns.iter().enumerate() {
            let mut acc = 0.0;
            for &(j, c) in col {
                acc += c * g[j];
            }
            s[i] = self.exposure * (acc + self.background[i]);
        }
    }

    fn jacobian_into(&self, theta: &[f64], x: &mut DMatrix<f64>) {
        let d = self.n_params();
        let mut xc = DMatrix::zeros(self.continuum.n_bins(), d);
        self.continuum.jacobian_into(theta, &mut xc);
        for (i, col) in self.columns.iter().enumerate() {
            for k in 0..d {
                let mut acc = 0.0;
                for &(j, c) in col {
                    acc += c * xc[(j, k)];
                }
                x[(i, k)] = self.exposure * acc;
            }
        }
    }

    fn guess_from_levels(&self, levels: &[f64]) -> Vec<f64> {
        let l = self.levels(levels);
        self.continuum.guess_from_levels(&l)
    }

    fn initial_guess(&self, data: &BinnedDataset) -> Vec<f64> {
        let counts: Vec<f64> = data.counts().iter().map(|&n| n as f64 + 0.5).collect();
        self.guess_from_levels(&counts)
    }
}

/// Model kinds accepted in configuration files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Constant,
    Powerlaw,
    #[serde(rename = "powerlaw+line")]
    PowerlawLine,
    Loglinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineConfig {
    pub m1: usize,
    pub m2: usize,
    #[serde(rename = "Psi", default, skip_serializing_if = "Option::is_none")]
    pub psi: Option<f64>,
}

/// JSON model description, e.g.
/// `{"model":"powerlaw","params":{"K":1.0,"Gamma":3.0},"line":{"m1":10,"m2":20,"Psi":2.0}}`.
///
/// A `line` block on a power law selects the line model. Parameter values are
/// used as the fit start and as the truth for simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub model: ModelKind,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<LineConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exposure: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy: Option<EnergyPoint>,
}

impl ModelConfig {
    /// Build the model on the dataset's grid, folding through `response` when given.
    pub fn build(&self, data: &BinnedDataset, response: Option<&InstrumentResponse>) -> Result<Box<dyn SpectralModel>> {
        let point = self.energy.unwrap_or_default();
        let edges: Vec<f64> = match response {
            Some(r) => r.model_edges().to_vec(),
            None => data.edges().to_vec(),
        };
        let n_inner = edges.len() - 1;
        let mut line = self.line.clone();
        let mut kind = self.model;
        if kind == ModelKind::Powerlaw && line.is_some() {
            kind = ModelKind::PowerlawLine;
        }
        let inner: Box<dyn SpectralModel> = match kind {
            ModelKind::Constant => Box::new(Constant::new(n_inner)?),
            ModelKind::Powerlaw => Box::new(PowerLaw::on_edges(&edges, point)?),
            ModelKind::PowerlawLine => {
                let l = line
                    .take()
                    .ok_or_else(|| Error::invalid("powerlaw+line requires a `line` block"))?;
                Box::new(PowerLawWithLine::on_edges(&edges, point, l.m1, l.m2)?)
            }
            ModelKind::Loglinear => {
                let rows = self
                    .design
                    .as_ref()
                    .ok_or_else(|| Error::invalid("loglinear requires a `design` matrix"))?;
                let d = rows.first().map_or(0, Vec::len);
                if rows.len() != n_inner || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::invalid(format!(
                        "design must have {n_inner} rows of equal length"
                    )));
                }
                Box::new(LogLinear::new(DMatrix::from_fn(n_inner, d, |i, k| rows[i][k]))?)
            }
        };
        if kind != ModelKind::PowerlawLine && self.line.is_some() {
            return Err(Error::invalid(format!(
                "`line` is not valid for model {:?}",
                self.model
            )));
        }
        let exposure = self.exposure.unwrap_or(data.exposure());
        let background = data.background().map(<[f64]>::to_vec);
        let model: Box<dyn SpectralModel> = match response {
            Some(r) => Box::new(FoldedModel::new(inner, r, background, exposure)?),
            None if background.is_some() || exposure != 1.0 => {
                let area = vec![1.0; data.len()];
                // Without a response the continuum is already in counts per bin, so
                // unit widths keep s_i = T (g_i + B_i).
                let unit_edges: Vec<f64> = (0..=data.len()).map(|i| i as f64).collect();
                Box::new(FoldedModel::unfolded(inner, &area, &unit_edges, background, exposure)?)
            }
            None => inner,
        };
        if model.n_bins() != data.len() {
            return Err(Error::invalid(format!(
                "model has {} channels but the dataset has {}",
                model.n_bins(),
                data.len()
            )));
        }
        Ok(model)
    }

    /// Parameter vector from `params` (and `line.Psi`), in model order.
    ///
    /// Returns `None` when no values are given; errors when only some are.
    pub fn theta(&self, model: &dyn SpectralModel) -> Result<Option<Vec<f64>>> {
        let mut given = self.params.clone();
        if let Some(psi) = self.line.as_ref().and_then(|l| l.psi) {
            given.insert("Psi".into(), psi);
        }
        if given.is_empty() {
            return Ok(None);
        }
        for key in given.keys() {
            if !model.params().iter().any(|p| &p.name == key) {
                return Err(Error::invalid(format!(
                    "unknown parameter `{key}` for {}",
                    model.name()
                )));
            }
        }
        let theta = model
            .params()
            .iter()
            .map(|p| {
                given
                    .get(&p.name)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("missing value for parameter `{}`", p.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        check_bounds(model.params(), &theta)?;
        Ok(Some(theta))
    }
}
