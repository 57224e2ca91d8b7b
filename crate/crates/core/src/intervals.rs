//! Pointwise prediction intervals for density forecasts.
//!
//! Both methods start from a bank of validation residuals `d - d̂` at a
//! fixed horizon. The SD method scales the coordinatewise standard deviation
//! by a tuned multiplier; the conformal method uses the empirical quantile of
//! absolute residuals directly.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::DensityForecast;

/// Search grid for the SD multiplier: `0.00, 0.01, ..., 5.00`.
pub const XI_GRID_STEPS: usize = 500;
pub const XI_GRID_STEP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum IntervalMethod {
    #[serde(rename = "SD")]
    Sd,
    #[serde(rename = "CONFORMAL")]
    Conformal,
}

impl IntervalMethod {
    pub const ALL: [IntervalMethod; 2] = [IntervalMethod::Sd, IntervalMethod::Conformal];

    pub fn name(self) -> &'static str {
        match self {
            IntervalMethod::Sd => "SD",
            IntervalMethod::Conformal => "CONFORMAL",
        }
    }
}

impl fmt::Display for IntervalMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IntervalMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sd" => Ok(IntervalMethod::Sd),
            "conformal" => Ok(IntervalMethod::Conformal),
            _ => Err(Error::Config(format!("unknown interval method `{s}` (expected sd or conformal)"))),
        }
    }
}

/// Density-scale validation residuals at one horizon, `M × A`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBank {
    pub horizon: usize,
    pub residuals: DMatrix<f64>,
}

impl ResidualBank {
    pub fn new(horizon: usize, residuals: DMatrix<f64>) -> Result<Self> {
        if residuals.nrows() == 0 {
            return Err(Error::EmptyBank(horizon));
        }
        if residuals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("residual bank"));
        }
        Ok(Self { horizon, residuals })
    }

    pub fn len(&self) -> usize {
        self.residuals.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.residuals.ncols()
    }
}

/// Residuals `actual - forecast`, row by row. Both are `M × A`.
pub fn collect_residuals(horizon: usize, actual: &DMatrix<f64>, forecast: &DMatrix<f64>) -> Result<ResidualBank> {
    if actual.shape() != forecast.shape() {
        return Err(Error::Shape(format!(
            "actuals are {:?} but forecasts are {:?}",
            actual.shape(),
            forecast.shape()
        )));
    }
    ResidualBank::new(horizon, actual - forecast)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdCalibration {
    pub horizon: usize,
    pub alpha: f64,
    /// Coordinatewise sample standard deviation (divisor `M - 1`).
    pub gamma: Vec<f64>,
    pub xi: f64,
    /// Coverage of the bank at the selected `xi`.
    pub validation_coverage: f64,
    /// Set when `gamma` is identically zero.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalCalibration {
    pub horizon: usize,
    pub alpha: f64,
    pub q: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Calibration {
    Sd(SdCalibration),
    Conformal(ConformalCalibration),
}

impl Calibration {
    pub fn method(&self) -> IntervalMethod {
        match self {
            Calibration::Sd(_) => IntervalMethod::Sd,
            Calibration::Conformal(_) => IntervalMethod::Conformal,
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Calibration::Sd(c) => c.horizon,
            Calibration::Conformal(c) => c.horizon,
        }
    }

    pub fn alpha(&self) -> f64 {
        match self {
            Calibration::Sd(c) => c.alpha,
            Calibration::Conformal(c) => c.alpha,
        }
    }

    /// Half-width at each age.
    pub fn width(&self) -> Vec<f64> {
        match self {
            Calibration::Sd(c) => c.gamma.iter().map(|g| c.xi * g).collect(),
            Calibration::Conformal(c) => c.q.clone(),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("alpha must lie in [0, 1), got {alpha}")));
    }
    Ok(())
}

fn xi_at(i: usize) -> f64 {
    i as f64 * XI_GRID_STEP
}

/// Whether a residual lies inside `±xi·gamma`.
fn covered(e: f64, xi: f64, gamma: f64) -> bool {
    e.abs() <= xi * gamma
}

/// Smallest grid index covering `e`, or `None` if no grid value does.
fn first_covering_index(e: f64, gamma: f64) -> Option<usize> {
    if !covered(e, xi_at(XI_GRID_STEPS), gamma) {
        return None;
    }
    let (mut lo, mut hi) = (0usize, XI_GRID_STEPS);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if covered(e, xi_at(mid), gamma) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Some(lo)
}

/// Picks `xi` on the grid minimising `|coverage - (1 - alpha)|` over every
/// (residual, age) cell; ties go to the smaller `xi`.
pub fn calibrate_sd(bank: &ResidualBank, alpha: f64) -> Result<SdCalibration> {
    check_alpha(alpha)?;
    let (m, a) = bank.residuals.shape();
    if m < 2 {
        return Err(Error::Invalid(format!(
            "SD calibration at horizon {} needs at least 2 residuals, got {m}",
            bank.horizon
        )));
    }
    let gamma: Vec<f64> = (0..a)
        .map(|u| {
            let col = bank.residuals.column(u);
            let mean = col.sum() / m as f64;
            let ss: f64 = col.iter().map(|e| (e - mean).powi(2)).sum();
            (ss / (m - 1) as f64).sqrt()
        })
        .collect();
    if gamma.iter().all(|g| *g == 0.0) {
        log::warn!("horizon {}: zero residual spread, intervals are degenerate", bank.horizon);
        let hits = bank.residuals.iter().filter(|e| **e == 0.0).count();
        return Ok(SdCalibration {
            horizon: bank.horizon,
            alpha,
            gamma,
            xi: 0.0,
            validation_coverage: hits as f64 / (m * a) as f64,
            degenerate: true,
        });
    }

    let mut hist = vec![0usize; XI_GRID_STEPS + 1];
    for u in 0..a {
        for r in 0..m {
            if let Some(i) = first_covering_index(bank.residuals[(r, u)], gamma[u]) {
                hist[i] += 1;
            }
        }
    }
    let total = (m * a) as f64;
    let target = 1.0 - alpha;
    let (mut best_i, mut best_obj, mut best_cov) = (0, f64::INFINITY, 0.0);
    let mut cum = 0usize;
    for (i, count) in hist.iter().enumerate() {
        cum += count;
        let cov = cum as f64 / total;
        let obj = (cov - target).abs();
        if obj < best_obj {
            (best_i, best_obj, best_cov) = (i, obj, cov);
        }
    }
    Ok(SdCalibration {
        horizon: bank.horizon,
        alpha,
        gamma,
        xi: xi_at(best_i),
        validation_coverage: best_cov,
        degenerate: false,
    })
}

/// Linear-interpolation ("type 7") quantile of `values` at probability `p`.
pub fn quantile_type7(values: &mut [f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of empty sample");
    values.sort_by(f64::total_cmp);
    let h = (values.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(values.len() - 1);
    values[lo] + (h - lo as f64) * (values[hi] - values[lo])
}

/// Per-age `100(1 - alpha)%` quantile of absolute residuals.
pub fn calibrate_conformal(bank: &ResidualBank, alpha: f64) -> Result<ConformalCalibration> {
    check_alpha(alpha)?;
    let q = bank
        .residuals
        .column_iter()
        .map(|col| {
            let mut abs: Vec<f64> = col.iter().map(|e| e.abs()).collect();
            quantile_type7(&mut abs, 1.0 - alpha)
        })
        .collect();
    Ok(ConformalCalibration {
        horizon: bank.horizon,
        alpha,
        q,
    })
}

pub fn calibrate(bank: &ResidualBank, method: IntervalMethod, alpha: f64) -> Result<Calibration> {
    Ok(match method {
        IntervalMethod::Sd => Calibration::Sd(calibrate_sd(bank, alpha)?),
        IntervalMethod::Conformal => Calibration::Conformal(calibrate_conformal(bank, alpha)?),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalForecast {
    pub method: IntervalMethod,
    pub alpha: f64,
    pub horizon: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// `point ± width`, lower bound clamped at zero.
pub fn interval_from_point(point: &[f64], cal: &Calibration) -> Result<IntervalForecast> {
    let width = cal.width();
    if width.len() != point.len() {
        return Err(Error::Shape(format!(
            "calibration has {} ages but the forecast has {}",
            width.len(),
            point.len()
        )));
    }
    Ok(IntervalForecast {
        method: cal.method(),
        alpha: cal.alpha(),
        horizon: cal.horizon(),
        lower: point.iter().zip(&width).map(|(p, w)| (p - w).max(0.0)).collect(),
        upper: point.iter().zip(&width).map(|(p, w)| p + w).collect(),
    })
}

/// Interval around the forecast step matching the calibration horizon.
pub fn build_interval(point: &DensityForecast, cal: &Calibration) -> Result<IntervalForecast> {
    let h = cal.horizon();
    if h < 1 || h > point.horizon() {
        return Err(Error::Invalid(format!(
            "calibration is for horizon {h} but the forecast covers 1..={}",
            point.horizon()
        )));
    }
    interval_from_point(&point.step(h), cal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelKind;
    use crate::panel::Sex;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn bank(rows: &[&[f64]]) -> ResidualBank {
        let a = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        ResidualBank::new(1, DMatrix::from_row_slice(rows.len(), a, &flat)).unwrap()
    }

    fn brute_force_xi(b: &ResidualBank, gamma: &[f64], alpha: f64) -> f64 {
        let (m, a) = b.residuals.shape();
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=XI_GRID_STEPS {
            let xi = xi_at(i);
            let mut hit = 0;
            for r in 0..m {
                for u in 0..a {
                    if b.residuals[(r, u)].abs() <= xi * gamma[u] {
                        hit += 1;
                    }
                }
            }
            let obj = (hit as f64 / (m * a) as f64 - (1.0 - alpha)).abs();
            if obj < best.0 {
                best = (obj, xi);
            }
        }
        best.1
    }

    #[test]
    fn empty_bank() {
        let e = ResidualBank::new(3, DMatrix::zeros(0, 4)).unwrap_err();
        assert!(matches!(e, Error::EmptyBank(3)));
    }

    #[test]
    fn perfect_forecasts() {
        let x = DMatrix::from_fn(3, 4, |i, j| (i + j) as f64);
        let b = collect_residuals(2, &x, &x).unwrap();
        assert!(b.residuals.iter().all(|v| *v == 0.0));
        let sd = calibrate_sd(&b, 0.2).unwrap();
        assert!(sd.degenerate);
        assert_eq!(sd.xi, 0.0);
        let cf = calibrate_conformal(&b, 0.2).unwrap();
        assert!(cf.q.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn residuals_are_direct_differences() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let f = DMatrix::from_row_slice(2, 2, &[0.5, 2.5, 3.0, 1.0]);
        let b = collect_residuals(1, &a, &f).unwrap();
        assert_eq!(b.residuals, DMatrix::from_row_slice(2, 2, &[0.5, -0.5, 0.0, 3.0]));
    }

    #[test]
    fn plus_minus_gamma() {
        // sd of (+1, -1, +1, -1) is sqrt(4/3); every |e|/γ = sqrt(3)/2 ≈ 0.866
        let b = bank(&[&[1.0, 2.0], &[-1.0, -2.0], &[1.0, 2.0], &[-1.0, -2.0]]);
        let sd = calibrate_sd(&b, 0.2).unwrap();
        assert!((sd.xi - 0.87).abs() < 1e-12, "{}", sd.xi);
        assert_eq!(sd.validation_coverage, 1.0);
        assert_eq!(sd.xi, brute_force_xi(&b, &sd.gamma, 0.2));
    }

    #[test]
    fn zero_alpha_covers_everything() {
        let b = bank(&[&[0.3, -2.0], &[-1.0, 0.5], &[2.5, 1.0]]);
        let sd = calibrate_sd(&b, 0.0).unwrap();
        assert_eq!(sd.validation_coverage, 1.0);
        let need = (0..2)
            .flat_map(|u| (0..3).map(move |r| (r, u)))
            .map(|(r, u)| b.residuals[(r, u)].abs() / sd.gamma[u])
            .fold(0.0, f64::max);
        assert!(sd.xi >= need && sd.xi - need < XI_GRID_STEP + 1e-12);
    }

    #[test]
    fn gaussian_xi_near_normal_quantile() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let reps = 200;
        let mut total = 0.0;
        for _ in 0..reps {
            let r = DMatrix::from_fn(16, 111, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            });
            total += calibrate_sd(&ResidualBank::new(1, r).unwrap(), 0.2).unwrap().xi;
        }
        let mean = total / reps as f64;
        assert!((mean - 1.2816).abs() < 0.1, "{mean}");
    }

    #[test]
    fn conformal_examples() {
        let b = bank(&[&[1.0, -0.5], &[-2.0, 0.0], &[3.0, 0.0], &[4.0, 0.0], &[-5.0, 0.0]]);
        let c = calibrate_conformal(&b, 0.2).unwrap();
        assert!((c.q[0] - 4.2).abs() < 1e-12);
        let one = bank(&[&[-1.5, 2.0, 0.0]]);
        assert_eq!(calibrate_conformal(&one, 0.2).unwrap().q, vec![1.5, 2.0, 0.0]);
    }

    #[test]
    fn clamped_lower_bound() {
        let cal = Calibration::Conformal(ConformalCalibration {
            horizon: 1,
            alpha: 0.2,
            q: vec![150.0, 0.0],
        });
        let iv = interval_from_point(&[100.0, 7.0], &cal).unwrap();
        assert_eq!(iv.lower, vec![0.0, 7.0]);
        assert_eq!(iv.upper, vec![250.0, 7.0]);
    }

    #[test]
    fn horizon_mismatch() {
        let point = DensityForecast {
            model: ModelKind::Ufts,
            group: "01".into(),
            sex: Sex::Female,
            origin: 2000,
            values: DMatrix::from_element(2, 3, 1.0),
            radix: 3.0,
            rearranged_rows: 0,
        };
        let cal = Calibration::Conformal(ConformalCalibration {
            horizon: 3,
            alpha: 0.2,
            q: vec![0.0; 3],
        });
        assert!(build_interval(&point, &cal).is_err());
        let cal2 = Calibration::Conformal(ConformalCalibration {
            horizon: 2,
            alpha: 0.2,
            q: vec![0.5; 3],
        });
        let iv = build_interval(&point, &cal2).unwrap();
        assert_eq!(iv.upper, vec![1.5; 3]);
    }

    fn bank_strategy() -> impl Strategy<Value = ResidualBank> {
        (2usize..12, 1usize..6).prop_flat_map(|(m, a)| {
            prop::collection::vec(-10.0f64..10.0, m * a)
                .prop_map(move |v| ResidualBank::new(1, DMatrix::from_vec(m, a, v)).unwrap())
        })
    }

    proptest! {
        #[test]
        fn sd_matches_grid_brute_force(b in bank_strategy(), alpha in 0.0f64..0.5) {
            let sd = calibrate_sd(&b, alpha).unwrap();
            prop_assert_eq!(sd.xi, brute_force_xi(&b, &sd.gamma, alpha));
        }

        #[test]
        fn monotone_in_alpha(b in bank_strategy(), a1 in 0.0f64..0.5, d in 0.0f64..0.49) {
            let a2 = a1 + d;
            let c1 = calibrate_conformal(&b, a1).unwrap();
            let c2 = calibrate_conformal(&b, a2).unwrap();
            for (x, y) in c1.q.iter().zip(&c2.q) {
                prop_assert!(x >= y);
            }
            let s1 = calibrate_sd(&b, a1).unwrap();
            let s2 = calibrate_sd(&b, a2).unwrap();
            prop_assert!(s1.xi >= s2.xi);
        }

        #[test]
        fn conformal_covers_its_bank(b in bank_strategy(), alpha in 0.01f64..0.5) {
            let c = calibrate_conformal(&b, alpha).unwrap();
            let (m, a) = b.residuals.shape();
            let hit = (0..m).flat_map(|r| (0..a).map(move |u| (r, u)))
                .filter(|&(r, u)| b.residuals[(r, u)].abs() <= c.q[u]).count();
            // type 7 guarantees floor((M - 1)p) + 1 order statistics per age
            let per_age = ((m - 1) as f64 * (1.0 - alpha)).floor() as usize + 1;
            prop_assert!(hit >= per_age * a);
        }

        #[test]
        fn symmetric_before_clamp(point in prop::collection::vec(0.0f64..100.0, 4), q in prop::collection::vec(0.0f64..50.0, 4)) {
            let cal = Calibration::Conformal(ConformalCalibration { horizon: 1, alpha: 0.2, q });
            let iv = interval_from_point(&point, &cal).unwrap();
            for u in 0..4 {
                prop_assert!(iv.lower[u] <= iv.upper[u]);
                prop_assert!(iv.lower[u] >= 0.0);
                if iv.lower[u] > 0.0 {
                    prop_assert!(((iv.upper[u] - point[u]) - (point[u] - iv.lower[u])).abs() < 1e-9);
                }
            }
        }
    }
}
