//! Poisson spectral fitting with the Cash (C) statistic and calibrated
//! goodness-of-fit tests for sparse binned counts.
//!
//! The crate is organised bottom-up:
//!
//! * [`dataset`], [`response`], [`model`], [`simulate`]: channel grids,
//!   instrument folding, parametric expected counts and Poisson simulation.
//! * [`cash`]: the C function, its per-bin terms and its gradient.
//! * [`fit`]: maximum-likelihood fitting by quasi-Newton minimisation of C.
//! * [`cumulants`]: per-rate Poisson cumulants of the per-bin C term and the
//!   persisted interpolation table.
//! * [`gof`]: the goodness-of-fit tests (LR-chi2, naive and corrected Z,
//!   parametric and double bootstrap).
//! * [`calibrate`]: Monte Carlo harness for null histograms, Type-I error,
//!   power, response-matrix sensitivity and runtime comparisons.
//! * [`report`]: serialisable analysis reports.

pub mod calibrate;
pub mod cash;
pub mod cumulants;
pub mod dataset;
pub mod error;
pub mod fit;
pub mod gof;
pub mod model;
pub mod report;
pub mod response;
pub mod seed;
pub mod simulate;
pub mod stats;
mod sum;

pub use error::{Error, Result};
