//! Maximum-likelihood fitting by minimising C with a bounded quasi-Newton method.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cash::{c_term, weighted_column_sums};
use crate::dataset::BinnedDataset;
use crate::error::{Error, Result};
use crate::model::{check_bounds, FloorPolicy, ParamSpec, ParameterVector, SpectralModel, EPS_FLOOR};
use crate::sum::KahanSum;

/// Condition number above which the Fisher information is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitResult {
    pub theta_hat: ParameterVector,
    pub c_min: f64,
    /// `X^T V^-1 X` at the estimate.
    #[serde(with = "matrix_rows")]
    pub fisher: DMatrix<f64>,
    pub n_iter: usize,
    pub converged: bool,
    pub grad_norm: f64,
    /// Parameters stopped at a bound with the gradient pointing outwards.
    #[serde(default)]
    pub pinned: Vec<String>,
    /// Bins whose expected count was raised to the positivity floor.
    #[serde(default)]
    pub clamped_bins: Vec<usize>,
}

impl FitResult {
    pub fn theta(&self) -> &[f64] {
        &self.theta_hat.values
    }
}

#[derive(Clone, Debug)]
pub struct FitOptions {
    pub tol_grad: f64,
    /// Once the line search stalls, accept a point whose Newton decrement
    /// `g' F^-1 g` is below `tol_decrement (1 + |C|)`.
    pub tol_decrement: f64,
    pub max_iter: usize,
    /// Also start from the initial point scaled by 2 and by 0.5 and keep the best.
    pub multistart: bool,
    pub floor: FloorPolicy,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol_grad: 1e-8,
            tol_decrement: 1e-12,
            max_iter: 500,
            multistart: true,
            floor: FloorPolicy::Clamp,
        }
    }
}

impl FitOptions {
    /// One start only; used for bootstrap and Monte Carlo refits.
    pub fn single_start() -> Self {
        Self {
            multistart: false,
            ..Self::default()
        }
    }
}

/// `X^T V^-1 X` for `V = diag(s)`, rejecting singular or ill-conditioned results.
pub fn fisher_information(x: &DMatrix<f64>, s: &[f64]) -> Result<DMatrix<f64>> {
    if x.nrows() != s.len() {
        return Err(Error::LengthMismatch {
            expected: s.len(),
            found: x.nrows(),
        });
    }
    if s.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::domain("variances must be positive"));
    }
    let f = fisher_unchecked(x, s);
    let condition = condition_number(&f);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::IllConditioned { condition });
    }
    Ok(f)
}

pub(crate) fn fisher_unchecked(x: &DMatrix<f64>, s: &[f64]) -> DMatrix<f64> {
    let d = x.ncols();
    let mut f = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let mut acc = KahanSum::new();
            for i in 0..x.nrows() {
                acc.add(x[(i, a)] * x[(i, b)] / s[i]);
            }
            f[(a, b)] = acc.value();
            f[(b, a)] = f[(a, b)];
        }
    }
    f
}

/// Ratio of extreme eigenvalues of a symmetric matrix (infinite when not positive definite).
pub fn condition_number(f: &DMatrix<f64>) -> f64 {
    if f.nrows() == 0 {
        return 1.0;
    }
    let eig = f.clone().symmetric_eigen().eigenvalues;
    let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) || !max.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Floored expected counts and Jacobian at `theta`; rows of floored bins are zero.
pub fn design_at(model: &dyn SpectralModel, theta: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    check_bounds(model.params(), theta)?;
    let mut s = vec![0.0; model.n_bins()];
    model.eval_into(theta, &mut s);
    let mut x = DMatrix::zeros(model.n_bins(), model.n_params());
    model.jacobian_into(theta, &mut x);
    for (i, v) in s.iter_mut().enumerate() {
        if !v.is_finite() {
            return Err(Error::ModelViolation { bin: i, value: *v });
        }
        if *v < EPS_FLOOR {
            *v = EPS_FLOOR;
            x.row_mut(i).fill(0.0);
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("model Jacobian is not finite"));
    }
    Ok((s, x))
}

pub fn fit_mle(data: &BinnedDataset, model: &dyn SpectralModel, init: Option<&[f64]>) -> Result<FitResult> {
    fit_with(data, model, init, &FitOptions::default())
}

pub fn fit_with(
    data: &BinnedDataset,
    model: &dyn SpectralModel,
    init: Option<&[f64]>,
    opts: &FitOptions,
) -> Result<FitResult> {
    if data.len() != model.n_bins() {
        return Err(Error::LengthMismatch {
            expected: model.n_bins(),
            found: data.len(),
        });
    }
    let specs = model.params();
    let theta0: Vec<f64> = match init {
        Some(t) => {
            check_bounds(specs, t)?;
            t.to_vec()
        }
        None => model.initial_guess(data),
    };
    let mut starts = vec![theta0.clone()];
    if opts.multistart {
        for factor in [2.0, 0.5] {
            starts.push(theta0.iter().zip(specs).map(|(v, p)| p.clamp(v * factor)).collect());
        }
    }

    let mut obj = Objective::new(model, data.counts(), opts.floor);
    let mut results = Vec::with_capacity(starts.len());
    for start in &starts {
        results.push(minimise(&mut obj, start, opts)?);
    }
    let order = |a: &Candidate, b: &Candidate| {
        a.c.total_cmp(&b.c).then_with(|| {
            a.theta
                .iter()
                .zip(&b.theta)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    };
    let best = results.iter().min_by(|a, b| order(a, b)).expect("at least one start");
    let chosen = if best.converged {
        best
    } else {
        let slack = opts.tol_grad * (1.0 + best.c.abs());
        results
            .iter()
            .filter(|r| r.converged && r.c <= best.c + slack)
            .min_by(|a, b| order(a, b))
            .unwrap_or(best)
    };
    let fit = obj.finish(chosen)?;
    for name in &fit.pinned {
        log::warn!("{}: parameter `{name}` pinned at its bound", model.name());
    }
    if fit.converged {
        Ok(fit)
    } else {
        Err(Error::NonConvergence {
            iterations: fit.n_iter,
            best: Box::new(fit),
        })
    }
}

struct Candidate {
    theta: Vec<f64>,
    c: f64,
    n_iter: usize,
    converged: bool,
    grad_norm: f64,
    pinned: Vec<usize>,
}

struct Objective<'a> {
    model: &'a dyn SpectralModel,
    counts: &'a [u64],
    policy: FloorPolicy,
    specs: &'a [ParamSpec],
    s: Vec<f64>,
    x: DMatrix<f64>,
    clamped: Vec<bool>,
    w: Vec<f64>,
}

impl<'a> Objective<'a> {
    fn new(model: &'a dyn SpectralModel, counts: &'a [u64], policy: FloorPolicy) -> Self {
        let n = model.n_bins();
        Self {
            model,
            counts,
            policy,
            specs: model.params(),
            s: vec![0.0; n],
            x: DMatrix::zeros(n, model.n_params()),
            clamped: vec![false; n],
            w: vec![0.0; n],
        }
    }

    fn theta_of(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(self.specs).map(|(&v, p)| p.transform.inverse(v)).collect()
    }

    /// C at `theta`; infinite when the model misbehaves.
    fn value(&mut self, theta: &[f64]) -> Result<f64> {
        self.model.eval_into(theta, &mut self.s);
        let mut acc = KahanSum::new();
        for i in 0..self.s.len() {
            let mut si = self.s[i];
            if !si.is_finite() {
                return Ok(f64::INFINITY);
            }
            self.clamped[i] = false;
            if si < EPS_FLOOR {
                if self.policy == FloorPolicy::Error {
                    return Err(Error::ModelViolation { bin: i, value: si });
                }
                si = EPS_FLOOR;
                self.s[i] = si;
                self.clamped[i] = true;
            }
            acc.add(c_term(self.counts[i] as f64, si));
        }
        Ok(acc.value())
    }

    /// Gradient in `theta` at the point last passed to [`Self::value`].
    fn gradient(&mut self, theta: &[f64]) -> DVector<f64> {
        self.model.jacobian_into(theta, &mut self.x);
        for i in 0..self.s.len() {
            self.w[i] = if self.clamped[i] {
                0.0
            } else {
                2.0 * (1.0 - self.counts[i] as f64 / self.s[i])
            };
        }
        weighted_column_sums(&self.x, &self.w)
    }

    /// Inverse of the expected Hessian `2 J F J` in the optimisation coordinates.
    fn initial_inverse_hessian(&mut self, theta: &[f64]) -> DMatrix<f64> {
        let d = theta.len();
        // self.x and self.s hold the values at theta after gradient().
        for i in 0..self.s.len() {
            if self.clamped[i] {
                self.x.row_mut(i).fill(0.0);
            }
        }
        let f = fisher_unchecked(&self.x, &self.s);
        let mut h = DMatrix::zeros(d, d);
        for a in 0..d {
            for b in 0..d {
                let ja = self.specs[a].transform.jacobian(theta[a]);
                let jb = self.specs[b].transform.jacobian(theta[b]);
                h[(a, b)] = 2.0 * ja * f[(a, b)] * jb;
            }
        }
        // Light ridge so near-singular curvature still yields a usable metric.
        let ridge = 1e-10 * (0..d).map(|k| h[(k, k)].abs()).fold(0.0, f64::max).max(1e-300);
        for k in 0..d {
            h[(k, k)] += ridge;
        }
        match h.clone().cholesky() {
            Some(ch) if h.iter().all(|v| v.is_finite()) => ch.inverse(),
            _ => DMatrix::identity(d, d),
        }
    }

    fn finish(&mut self, cand: &Candidate) -> Result<FitResult> {
        let theta = cand.theta.clone();
        let c = self.value(&theta)?;
        self.gradient(&theta);
        for i in 0..self.s.len() {
            if self.clamped[i] {
                self.x.row_mut(i).fill(0.0);
            }
        }
        let fisher = fisher_unchecked(&self.x, &self.s);
        let clamped_bins: Vec<usize> = (0..self.s.len()).filter(|&i| self.clamped[i]).collect();
        if !clamped_bins.is_empty() {
            log::warn!(
                "{}: {} bin(s) at the positivity floor in the fitted model",
                self.model.name(),
                clamped_bins.len()
            );
        }
        Ok(FitResult {
            theta_hat: ParameterVector::new(self.specs, theta)?,
            c_min: c,
            fisher,
            n_iter: cand.n_iter,
            converged: cand.converged,
            grad_norm: cand.grad_norm,
            pinned: cand.pinned.iter().map(|&k| self.specs[k].name.clone()).collect(),
            clamped_bins,
        })
    }
}

fn minimise(obj: &mut Objective<'_>, start: &[f64], opts: &FitOptions) -> Result<Candidate> {
    let specs = obj.specs;
    let d = specs.len();
    let (lo, hi): (Vec<f64>, Vec<f64>) = specs
        .iter()
        .map(|p| {
            (
                p.transform.forward(p.clamp(p.lower)),
                p.transform.forward(p.clamp(p.upper)),
            )
        })
        .unzip();
    let mut u: Vec<f64> = start
        .iter()
        .zip(specs)
        .map(|(&t, p)| p.transform.forward(p.clamp(t)))
        .collect();
    let mut theta = obj.theta_of(&u);
    let mut c = obj.value(&theta)?;
    if !c.is_finite() {
        return Err(Error::domain("C is not finite at the starting point"));
    }
    let mut g_theta = obj.gradient(&theta);
    let to_u = |g: &DVector<f64>, theta: &[f64]| -> DVector<f64> {
        DVector::from_iterator(d, (0..d).map(|k| g[k] * specs[k].transform.jacobian(theta[k])))
    };
    let mut g = to_u(&g_theta, &theta);
    let mut h = obj.initial_inverse_hessian(&theta);

    let mut n_iter = 0;
    let mut stalls = 0;
    loop {
        let active: Vec<bool> = (0..d)
            .map(|k| (u[k] <= lo[k] && g[k] > 0.0) || (u[k] >= hi[k] && g[k] < 0.0))
            .collect();
        let grad_norm = (0..d)
            .filter(|&k| !active[k])
            .map(|k| g_theta[k].abs())
            .fold(0.0, f64::max);
        let small_grad = grad_norm < opts.tol_grad * (1.0 + c.abs());
        if small_grad || n_iter >= opts.max_iter || stalls >= 2 {
            // Small K makes the gradient in theta unreachable in floating point; the
            // decrement is invariant to parameter scale.
            let converged = small_grad
                || (stalls >= 2 && newton_decrement(obj, &theta, &g, &active) < opts.tol_decrement * (1.0 + c.abs()));
            return Ok(Candidate {
                converged,
                theta,
                c,
                n_iter,
                grad_norm,
                pinned: (0..d).filter(|&k| active[k]).collect(),
            });
        }
        n_iter += 1;

        let g_free = DVector::from_iterator(d, (0..d).map(|k| if active[k] { 0.0 } else { g[k] }));
        let mut p = -(&h * &g_free);
        for k in 0..d {
            if active[k] {
                p[k] = 0.0;
            }
        }
        if p.dot(&g_free) >= 0.0 {
            h = obj.initial_inverse_hessian(&theta);
            p = -(&h * &g_free);
            for k in 0..d {
                if active[k] {
                    p[k] = 0.0;
                }
            }
            if p.dot(&g_free) >= 0.0 {
                p = -g_free.clone();
            }
        }
        let big = p.amax();
        if big > 10.0 {
            p *= 10.0 / big;
        }

        // Armijo backtracking along the projected path.
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = (0..d).map(|k| (u[k] + alpha * p[k]).clamp(lo[k], hi[k])).collect();
            let step: Vec<f64> = (0..d).map(|k| trial[k] - u[k]).collect();
            if step.iter().all(|v| *v == 0.0) {
                break;
            }
            let t_theta = obj.theta_of(&trial);
            let c_new = obj.value(&t_theta)?;
            let decrease: f64 = (0..d).map(|k| g[k] * step[k]).sum();
            if c_new.is_finite() && c_new <= c + 1e-4 * decrease {
                accepted = Some((trial, t_theta, c_new));
                break;
            }
            alpha *= if c_new.is_finite() { 0.5 } else { 0.1 };
        }
        let Some((u_new, theta_new, c_new)) = accepted else {
            // Restore the cached state at the current point and retry with a fresh metric.
            obj.value(&theta)?;
            g_theta = obj.gradient(&theta);
            h = obj.initial_inverse_hessian(&theta);
            stalls += 1;
            continue;
        };
        stalls = 0;
        let g_theta_new = obj.gradient(&theta_new);
        let g_new = to_u(&g_theta_new, &theta_new);
        let s_vec = DVector::from_iterator(d, (0..d).map(|k| u_new[k] - u[k]));
        let y_vec = &g_new - &g;
        let sy = s_vec.dot(&y_vec);
        if sy > 1e-12 * s_vec.norm() * y_vec.norm() && sy > 0.0 {
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(d, d);
            let left = &eye - rho * &s_vec * y_vec.transpose();
            let right = &eye - rho * &y_vec * s_vec.transpose();
            h = &left * &h * &right + rho * &s_vec * s_vec.transpose();
        }
        u = u_new;
        theta = theta_new;
        c = c_new;
        g = g_new;
        g_theta = g_theta_new;
    }
}

/// `g' H^-1 g` over the free coordinates, with `H` the expected Hessian in `u`.
/// Taking the free block of `H^-1` overestimates the decrement when bounds are active.
fn newton_decrement(obj: &mut Objective<'_>, theta: &[f64], g: &DVector<f64>, active: &[bool]) -> f64 {
    let h_inv = obj.initial_inverse_hessian(theta);
    let free: Vec<usize> = (0..g.len()).filter(|&k| !active[k]).collect();
    let mut acc = 0.0;
    for &a in &free {
        for &b in &free {
            acc += g[a] * h_inv[(a, b)] * g[b];
        }
    }
    if acc.is_finite() {
        acc.max(0.0)
    } else {
        f64::INFINITY
    }
}

/// Serialise a matrix as a list of rows.
pub(crate) mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, ser: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(de)?;
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(serde::de::Error::custom("matrix rows have differing lengths"));
        }
        Ok(DMatrix::from_fn(n, d, |i, k| rows[i][k]))
    }
}
