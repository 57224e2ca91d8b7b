//! Cumulative-distribution plus logit transform between death densities and
//! unconstrained functional data, and its inverse.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::panel::{AgeGrid, DeathDensitySeries, YearRange};

/// CDF values in {0, 1} are pulled into `[eps, 1 - eps]` before the logit.
pub const DEFAULT_CLIP_EPSILON: f64 = 1e-10;

/// Tolerance on probability row sums accepted by [`to_cdf`].
pub const PROBABILITY_SUM_TOLERANCE: f64 = 1e-9;

/// Cumulative distribution over ages; the last column is exactly one.
#[derive(Debug, Clone, PartialEq)]
pub struct CdfSeries {
    pub grid: AgeGrid,
    pub years: YearRange,
    pub values: DMatrix<f64>,
}

/// Logit of the CDF with the final (identically one) column dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitCdfSeries {
    /// Grid of the original densities; the matrix covers its first `len - 1` ages.
    pub grid: AgeGrid,
    pub years: YearRange,
    pub values: DMatrix<f64>,
    pub clip_epsilon: f64,
}

impl LogitCdfSeries {
    pub fn from_series(series: &DeathDensitySeries) -> Result<Self> {
        let p = series.normalize_to_probability();
        let cdf = to_cdf(&p, series.grid(), series.years())?;
        Ok(to_logit(&cdf, DEFAULT_CLIP_EPSILON))
    }
}

/// Cumulative sums along each row; the final entry is set to exactly one.
pub fn to_cdf(probabilities: &DMatrix<f64>, grid: AgeGrid, years: YearRange) -> Result<CdfSeries> {
    if probabilities.ncols() != grid.len() || probabilities.nrows() != years.len {
        return Err(Error::Shape(format!(
            "{}x{} probabilities for {} years and {} ages",
            probabilities.nrows(),
            probabilities.ncols(),
            years.len,
            grid.len()
        )));
    }
    let mut values = probabilities.clone();
    for (i, mut row) in values.row_iter_mut().enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
            return Err(Error::Invalid(format!(
                "probability row {i} sums to {sum}"
            )));
        }
        let mut acc = 0.0;
        for v in row.iter_mut() {
            acc += *v;
            *v = acc.min(1.0);
        }
        let last = row.len() - 1;
        row[last] = 1.0;
    }
    Ok(CdfSeries {
        grid,
        years,
        values,
    })
}

/// Logit of every column but the last, after clipping into `[eps, 1 - eps]`.
pub fn to_logit(cdf: &CdfSeries, clip_epsilon: f64) -> LogitCdfSeries {
    let m = cdf.values.ncols() - 1;
    let values = cdf
        .values
        .columns(0, m)
        .map(|d| logit(d.clamp(clip_epsilon, 1.0 - clip_epsilon)));
    LogitCdfSeries {
        grid: cdf.grid,
        years: cdf.years,
        values,
        clip_epsilon,
    }
}

/// Result of inverting logit-scale rows back to densities.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseResult {
    /// Rows × ages death counts summing to the radix.
    pub densities: DMatrix<f64>,
    /// Number of rows whose inverse-logit CDF was not monotone and had to be rearranged.
    pub rearranged_rows: usize,
}

/// Inverse logit, append the terminal one, sort each CDF row (monotone
/// rearrangement), first differences times the radix.
pub fn from_logit_values(x: &DMatrix<f64>, radix: f64) -> Result<InverseResult> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logit values"));
    }
    let (n, m) = x.shape();
    let mut densities = DMatrix::zeros(n, m + 1);
    let mut rearranged_rows = 0;
    let mut cdf = vec![0.0; m + 1];
    for i in 0..n {
        for j in 0..m {
            cdf[j] = inv_logit(x[(i, j)]);
        }
        cdf[m] = 1.0;
        if cdf.windows(2).any(|w| w[1] < w[0]) {
            rearranged_rows += 1;
            cdf.sort_by(f64::total_cmp);
        }
        let mut prev = 0.0;
        for j in 0..=m {
            densities[(i, j)] = (cdf[j] - prev) * radix;
            prev = cdf[j];
        }
    }
    Ok(InverseResult {
        densities,
        rearranged_rows,
    })
}

/// Maps a logit-CDF series back to a death-count series on its original grid.
pub fn from_logit(x: &LogitCdfSeries, radix: f64) -> Result<DeathDensitySeries> {
    let inv = from_logit_values(&x.values, radix)?;
    DeathDensitySeries::new(x.grid, x.years.first, inv.densities, radix)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
