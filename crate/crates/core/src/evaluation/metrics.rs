//! Divergences between density forecasts and holdout densities, and
//! interval accuracy measures. Inputs are `M × A` matrices whose rows are
//! aligned holdout years.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are floored here before taking logs.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

fn check_pair(actual: &DMatrix<f64>, forecast: &DMatrix<f64>) -> Result<()> {
    if actual.shape() != forecast.shape() {
        return Err(Error::Shape(format!(
            "actuals are {:?} but forecasts are {:?}",
            actual.shape(),
            forecast.shape()
        )));
    }
    if actual.nrows() == 0 || actual.ncols() == 0 {
        return Err(Error::Invalid("no holdout pairs to score".into()));
    }
    Ok(())
}

/// Row-normalised probabilities, floored at [`PROBABILITY_FLOOR`].
pub fn to_probabilities(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = x.clone();
    for mut row in p.row_iter_mut() {
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v = (*v / s).max(PROBABILITY_FLOOR);
        }
    }
    p
}

/// Jeffrey divergence at a single age.
pub fn jeffrey_term(p: f64, q: f64) -> f64 {
    let (lp, lq) = (p.ln(), q.ln());
    p * (lp - lq) + q * (lq - lp)
}

/// Symmetric Kullback-Leibler divergence averaged over the `M × A` cells.
pub fn kld_sym(actual: &DMatrix<f64>, forecast: &DMatrix<f64>) -> Result<f64> {
    check_pair(actual, forecast)?;
    let (p, q) = (to_probabilities(actual), to_probabilities(forecast));
    let mut total = 0.0;
    for r in 0..p.nrows() {
        for u in 0..p.ncols() {
            total += jeffrey_term(p[(r, u)], q[(r, u)]);
        }
    }
    Ok(total / p.len() as f64)
}

/// Jensen-Shannon divergence against the geometric mean `δ = sqrt(p q)`,
/// averaged over cells, then square-rooted.
pub fn jsd_root(actual: &DMatrix<f64>, forecast: &DMatrix<f64>) -> Result<f64> {
    check_pair(actual, forecast)?;
    let (p, q) = (to_probabilities(actual), to_probabilities(forecast));
    let mut total = 0.0;
    for r in 0..p.nrows() {
        for u in 0..p.ncols() {
            let (a, b) = (p[(r, u)], q[(r, u)]);
            let ld = (a * b).sqrt().ln();
            total += 0.5 * a * (a.ln() - ld) + 0.5 * b * (b.ln() - ld);
        }
    }
    Ok((total / p.len() as f64).max(0.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    /// Share of cells with `lower ≤ d ≤ upper`.
    pub ecp: f64,
    pub non_coverage: f64,
    /// `|non_coverage - alpha|`.
    pub cpd: f64,
}

fn check_interval(actual: &DMatrix<f64>, lower: &DMatrix<f64>, upper: &DMatrix<f64>) -> Result<()> {
    check_pair(actual, lower)?;
    check_pair(actual, upper)
}

pub fn ecp_cpd(actual: &DMatrix<f64>, lower: &DMatrix<f64>, upper: &DMatrix<f64>, alpha: f64) -> Result<Coverage> {
    check_interval(actual, lower, upper)?;
    let hits = actual
        .iter()
        .zip(lower.iter().zip(upper.iter()))
        .filter(|(d, (l, u))| *l <= *d && *d <= *u)
        .count();
    let ecp = hits as f64 / actual.len() as f64;
    let non_coverage = 1.0 - ecp;
    Ok(Coverage {
        ecp,
        non_coverage,
        cpd: (non_coverage - alpha).abs(),
    })
}

/// Interval score of one cell.
pub fn interval_score_cell(lower: f64, upper: f64, d: f64, alpha: f64) -> f64 {
    let mut s = upper - lower;
    if d < lower {
        s += 2.0 / alpha * (lower - d);
    }
    if d > upper {
        s += 2.0 / alpha * (d - upper);
    }
    s
}

/// Mean interval score over the `M × A` cells.
pub fn interval_score(actual: &DMatrix<f64>, lower: &DMatrix<f64>, upper: &DMatrix<f64>, alpha: f64) -> Result<f64> {
    check_interval(actual, lower, upper)?;
    let mut total = 0.0;
    for r in 0..actual.nrows() {
        for u in 0..actual.ncols() {
            total += interval_score_cell(lower[(r, u)], upper[(r, u)], actual[(r, u)], alpha);
        }
    }
    Ok(total / actual.len() as f64)
}

/// Mean and median of per-horizon values, skipping non-finite entries.
pub fn mean_median(values: &[f64]) -> (f64, f64) {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    };
    (mean, median)
}
