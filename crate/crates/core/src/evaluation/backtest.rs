use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ets::ScoreForecaster;
use crate::models::{forecast_panel, panel_densities, FitReport, LogitPanel, ModelSpec};
use crate::panel::{DeathDensityPanel, Sex, YearRange};

/// Expanding-window scheme: fit on years `≤ t` for every origin
/// `t = initial_end, ..., final_year - 1` and forecast `1..=min(H, final_year - t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BacktestPlan {
    pub initial_end: i32,
    pub final_year: i32,
    pub max_horizon: usize,
}

impl BacktestPlan {
    pub fn validate(&self, years: YearRange) -> Result<()> {
        if self.max_horizon == 0 {
            return Err(Error::Config("backtest horizon must be at least 1".into()));
        }
        if self.initial_end < years.first || self.final_year > years.last() || self.initial_end >= self.final_year {
            return Err(Error::Config(format!(
                "backtest {}..{} does not fit in years {}..{}",
                self.initial_end,
                self.final_year,
                years.first,
                years.last()
            )));
        }
        Ok(())
    }

    pub fn origins(&self) -> Vec<i32> {
        (self.initial_end..self.final_year).collect()
    }

    pub fn horizon_at(&self, origin: i32) -> usize {
        self.max_horizon.min((self.final_year - origin).max(0) as usize)
    }

    /// Forecasts available at horizon `h`.
    pub fn count(&self, h: usize) -> usize {
        self.origins().into_iter().filter(|&t| self.horizon_at(t) >= h).count()
    }

    pub fn horizons(&self) -> usize {
        self.horizon_at(self.initial_end)
    }
}

/// Forecasts for one (group, sex): origin × horizon × age, empty outside the triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastCube {
    pub origins: Vec<i32>,
    pub max_horizon: usize,
    cells: Vec<Option<Vec<f64>>>,
}

impl ForecastCube {
    pub fn new(origins: Vec<i32>, max_horizon: usize) -> Self {
        let n = origins.len() * max_horizon;
        Self {
            origins,
            max_horizon,
            cells: vec![None; n],
        }
    }

    fn index(&self, origin: i32, h: usize) -> Option<usize> {
        if h == 0 || h > self.max_horizon {
            return None;
        }
        let o = self.origins.iter().position(|&t| t == origin)?;
        Some(o * self.max_horizon + h - 1)
    }

    pub fn get(&self, origin: i32, h: usize) -> Option<&[f64]> {
        self.index(origin, h).and_then(|i| self.cells[i].as_deref())
    }

    pub fn set(&mut self, origin: i32, h: usize, values: Vec<f64>) {
        let i = self.index(origin, h).expect("cell inside the cube");
        self.cells[i] = Some(values);
    }

    /// Number of filled cells at horizon `h`.
    pub fn count(&self, h: usize) -> usize {
        self.origins.iter().filter(|&&t| self.get(t, h).is_some()).count()
    }

    /// `(target years, actuals, forecasts)` at horizon `h`, keeping targets `≤ last_target`.
    pub fn pairs(&self, h: usize, actual: &DMatrix<f64>, years: YearRange, last_target: i32) -> HorizonPairs {
        let mut target_years = Vec::new();
        let mut rows_a = Vec::new();
        let mut rows_f = Vec::new();
        for &t in &self.origins {
            let year = t + h as i32;
            if year > last_target {
                continue;
            }
            if let (Some(f), Some(idx)) = (self.get(t, h), years.index_of(year)) {
                target_years.push(year);
                rows_a.extend(actual.row(idx).iter().copied());
                rows_f.extend_from_slice(f);
            }
        }
        let a = actual.ncols();
        let m = target_years.len();
        HorizonPairs {
            horizon: h,
            years: target_years,
            actual: DMatrix::from_row_slice(m, a, &rows_a),
            forecast: DMatrix::from_row_slice(m, a, &rows_f),
        }
    }
}

/// Aligned holdout rows at one horizon, `M × A` each.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonPairs {
    pub horizon: usize,
    pub years: Vec<i32>,
    pub actual: DMatrix<f64>,
    pub forecast: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestFailure {
    pub origin: i32,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestResult {
    pub plan: BacktestPlan,
    pub spec: ModelSpec,
    pub cubes: BTreeMap<(String, Sex), ForecastCube>,
    pub failures: Vec<BacktestFailure>,
    /// Fit metadata per origin.
    pub reports: Vec<(i32, Vec<FitReport>)>,
}

impl BacktestResult {
    pub fn cube(&self, group: &str, sex: Sex) -> Option<&ForecastCube> {
        self.cubes.get(&(group.to_string(), sex))
    }
}

/// Refits `spec` at every origin of `plan`. A failing origin is recorded and
/// leaves its cells empty; the rest of the run continues.
pub fn run_expanding_window(
    panel: &LogitPanel,
    plan: &BacktestPlan,
    spec: &ModelSpec,
    forecaster: &dyn ScoreForecaster,
) -> Result<BacktestResult> {
    plan.validate(panel.years)?;
    spec.validate()?;
    let origins = plan.origins();
    let outcomes: Vec<Result<_>> = origins
        .par_iter()
        .map(|&t| {
            let n = (t - panel.years.first + 1) as usize;
            let train = panel.head(n)?;
            let fc = forecast_panel(&train, spec, plan.horizon_at(t), forecaster)?;
            let dens = panel_densities(&fc, panel.radix, spec.kind, t)?;
            Ok((dens, fc.reports))
        })
        .collect();

    let mut cubes: BTreeMap<(String, Sex), ForecastCube> = panel
        .series
        .keys()
        .map(|k| (k.clone(), ForecastCube::new(origins.clone(), plan.max_horizon)))
        .collect();
    let mut failures = Vec::new();
    let mut reports = Vec::new();
    for (&t, outcome) in origins.iter().zip(outcomes) {
        match outcome {
            Ok((dens, rep)) => {
                for (key, d) in dens {
                    let cube = cubes.get_mut(&key).expect("forecast for a panel series");
                    for h in 1..=d.horizon() {
                        cube.set(t, h, d.step(h));
                    }
                }
                reports.push((t, rep));
            }
            Err(e) => {
                log::warn!("{} fit at origin {t} failed: {e}", spec.kind);
                failures.push(BacktestFailure {
                    origin: t,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(BacktestResult {
        plan: *plan,
        spec: *spec,
        cubes,
        failures,
        reports,
    })
}

/// Density values of every modelled series, for pairing with cubes.
pub fn actual_densities(panel: &DeathDensityPanel) -> BTreeMap<(String, Sex), DMatrix<f64>> {
    let groups = panel.subnational_groups();
    panel
        .iter()
        .filter(|((g, _), _)| groups.contains(g))
        .map(|(k, s)| (k.clone(), s.values().clone()))
        .collect()
}
