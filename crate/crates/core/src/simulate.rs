//! Seeded Poisson simulation of binned counts.

use rand::Rng;
use statrs::function::gamma::ln_gamma;

use crate::dataset::BinnedDataset;
use crate::error::{Error, Result};
use crate::model::{expected_counts, SpectralModel};
use crate::seed::rng_from_seed;

/// Rates below this use sequential inversion, above it PTRS rejection.
const INVERSION_LIMIT: f64 = 30.0;

/// One Poisson draw with mean `lambda >= 0`.
pub fn sample_poisson<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u64 {
    if lambda <= 0.0 {
        0
    } else if lambda < INVERSION_LIMIT {
        inversion(rng, lambda)
    } else {
        ptrs(rng, lambda)
    }
}

fn inversion<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u64 {
    let u: f64 = rng.random();
    let mut k = 0u64;
    let mut p = (-lambda).exp();
    let mut cdf = p;
    while u > cdf {
        k += 1;
        p *= lambda / k as f64;
        let next = cdf + p;
        if next == cdf {
            // Rounding left the cumulative sum just short of u.
            break;
        }
        cdf = next;
    }
    k
}

// Transformed rejection with squeeze (Hormann 1993).
fn ptrs<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u64 {
    let slam = lambda.sqrt();
    let loglam = lambda.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.024_83 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = rng.random::<f64>() - 0.5;
        let v: f64 = rng.random();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + lambda + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        let lhs = v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln();
        let rhs = -lambda + k * loglam - ln_gamma(k + 1.0);
        if lhs <= rhs {
            return k as u64;
        }
    }
}

/// Independent Poisson counts for the given rates from a seeded stream.
pub fn sample_counts(rates: &[f64], seed: u64) -> Vec<u64> {
    let mut rng = rng_from_seed(seed);
    rates.iter().map(|&s| sample_poisson(&mut rng, s)).collect()
}

/// Draw `N_i ~ Poisson(s_i(theta))` on the grid of `template`.
pub fn simulate_counts(
    model: &dyn SpectralModel,
    theta: &[f64],
    template: &BinnedDataset,
    seed: u64,
) -> Result<BinnedDataset> {
    if model.n_bins() != template.len() {
        return Err(Error::LengthMismatch {
            expected: template.len(),
            found: model.n_bins(),
        });
    }
    let s = expected_counts(model, theta)?;
    template.with_counts(sample_counts(&s, seed))
}
