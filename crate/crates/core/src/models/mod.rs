//! The five forecasting strategies. Each decomposes logit-CDF curves with
//! functional principal components, forecasts the resulting scores (or
//! factors of them) and reconstructs curves.

mod fanova;
mod hdfpca;
mod mfts;
mod mlfts;
mod ufts;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cdf::{from_logit_values, LogitCdfSeries};
use crate::error::{Error, Result};
use crate::ets::{EtsFamily, EtsFit, ScoreForecaster};
use crate::fpca::SelectionPolicy;
use crate::panel::{AgeGrid, DeathDensityPanel, Sex, YearRange};

pub use fanova::{fanova_decompose, fit_forecast_fanova, FanovaDecomposition, FanovaForecast, FanovaParts};
pub use hdfpca::{fit_factor_model, fit_forecast_hdfpca, FactorModel, HdfpcaForecast, HdfpcaModel};
pub use mfts::{fit_forecast_mfts, MftsForecast, MftsModel};
pub use mlfts::{fit_forecast_mlfts, MlftsForecast, MlftsModel};
pub use ufts::{fit_forecast_ufts, UftsForecast};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "UFTS")]
    Ufts,
    #[serde(rename = "MFTS")]
    Mfts,
    #[serde(rename = "MLFTS")]
    Mlfts,
    #[serde(rename = "FANOVA")]
    Fanova,
    #[serde(rename = "HDFPCA")]
    Hdfpca,
}

impl ModelKind {
    /// Canonical order, also used to break ties between models.
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Ufts,
        ModelKind::Mfts,
        ModelKind::Mlfts,
        ModelKind::Fanova,
        ModelKind::Hdfpca,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Ufts => "UFTS",
            ModelKind::Mfts => "MFTS",
            ModelKind::Mlfts => "MLFTS",
            ModelKind::Fanova => "FANOVA",
            ModelKind::Hdfpca => "HDFPCA",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ufts" => Ok(ModelKind::Ufts),
            "mfts" => Ok(ModelKind::Mfts),
            "mlfts" => Ok(ModelKind::Mlfts),
            "fanova" => Ok(ModelKind::Fanova),
            "hdfpca" => Ok(ModelKind::Hdfpca),
            _ => Err(Error::Config(format!(
                "unknown model `{s}` (expected ufts, mfts, mlfts, fanova or hdfpca)"
            ))),
        }
    }
}

pub const DEFAULT_P0: usize = 6;
pub const DEFAULT_FACTORS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub selection: SelectionPolicy,
    /// HDFPCA first-stage components per series.
    pub p0: usize,
    /// HDFPCA factors per score index.
    pub r: usize,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, selection: SelectionPolicy) -> Self {
        Self {
            kind,
            selection,
            p0: DEFAULT_P0,
            r: DEFAULT_FACTORS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r < 1 || self.p0 < self.r {
            return Err(Error::Config(format!(
                "HDFPCA needs p0 >= r >= 1, got p0 = {}, r = {}",
                self.p0, self.r
            )));
        }
        Ok(())
    }
}

/// Per-fit metadata kept for run manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model: ModelKind,
    pub group: Option<String>,
    pub sex: Option<Sex>,
    /// Retained components (common components for MLFTS, first stage for HDFPCA).
    pub k: usize,
    /// Series-specific components (MLFTS) or factors (HDFPCA).
    pub l: Option<usize>,
    pub families: Vec<EtsFamily>,
    pub within_cluster_variability: Option<f64>,
}

pub(crate) fn families(fits: &[EtsFit]) -> Vec<EtsFamily> {
    fits.iter().map(|f| f.family).collect()
}

/// Logit-CDF curves for every modelled (group, sex), sharing one year range.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitPanel {
    pub groups: Vec<String>,
    pub grid: AgeGrid,
    pub years: YearRange,
    pub radix: f64,
    pub series: BTreeMap<(String, Sex), DMatrix<f64>>,
}

impl LogitPanel {
    /// Transforms every subnational series of `panel`.
    pub fn from_panel(panel: &DeathDensityPanel) -> Result<Self> {
        let groups = panel.subnational_groups();
        let mut series = BTreeMap::new();
        for g in &groups {
            for s in Sex::BOTH {
                if let Some(d) = panel.series(g, s) {
                    series.insert((g.clone(), s), LogitCdfSeries::from_series(d)?.values);
                }
            }
        }
        if series.is_empty() {
            return Err(Error::Invalid("no subnational series to model".into()));
        }
        Ok(Self {
            groups,
            grid: panel.grid(),
            years: panel.years(),
            radix: panel.radix(),
            series,
        })
    }

    /// Keeps the first `n` years.
    pub fn head(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.years.len {
            return Err(Error::Invalid(format!(
                "cannot keep {n} of {} years",
                self.years.len
            )));
        }
        Ok(Self {
            groups: self.groups.clone(),
            grid: self.grid,
            years: YearRange::new(self.years.first, n),
            radix: self.radix,
            series: self
                .series
                .iter()
                .map(|(k, m)| (k.clone(), m.rows(0, n).into_owned()))
                .collect(),
        })
    }

    pub fn sexes(&self) -> Vec<Sex> {
        Sex::BOTH
            .into_iter()
            .filter(|s| self.series.keys().any(|(_, k)| k == s))
            .collect()
    }

    pub fn get(&self, group: &str, sex: Sex) -> Result<&DMatrix<f64>> {
        self.series
            .get(&(group.to_string(), sex))
            .ok_or_else(|| Error::IncompletePanel(format!("missing ({group}, {sex})")))
    }

    /// Errors naming every absent (group, sex) cell.
    pub fn require_complete(&self) -> Result<()> {
        let missing: Vec<String> = self
            .groups
            .iter()
            .flat_map(|g| Sex::BOTH.iter().map(move |s| (g, *s)))
            .filter(|(g, s)| !self.series.contains_key(&((*g).clone(), *s)))
            .map(|(g, s)| format!("({g}, {s})"))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::IncompletePanel(format!("missing {}", missing.join(", "))))
        }
    }
}

/// Logit-scale forecasts for every (group, sex) plus fit metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelForecast {
    /// `horizon × (A - 1)` per series.
    pub logit: BTreeMap<(String, Sex), DMatrix<f64>>,
    pub reports: Vec<FitReport>,
}

/// Fits `spec` on the whole of `panel` and forecasts `1..=horizon` steps ahead.
pub fn forecast_panel(
    panel: &LogitPanel,
    spec: &ModelSpec,
    horizon: usize,
    forecaster: &dyn ScoreForecaster,
) -> Result<PanelForecast> {
    spec.validate()?;
    let mut logit = BTreeMap::new();
    let mut reports = Vec::new();
    match spec.kind {
        ModelKind::Ufts => {
            let keys: Vec<&(String, Sex)> = panel.series.keys().collect();
            let fits: Vec<Result<UftsForecast>> = keys
                .par_iter()
                .map(|k| fit_forecast_ufts(&panel.series[*k], spec.selection, horizon, forecaster))
                .collect();
            for (key, fit) in keys.into_iter().zip(fits) {
                let fit = fit?;
                reports.push(FitReport {
                    model: ModelKind::Ufts,
                    group: Some(key.0.clone()),
                    sex: Some(key.1),
                    k: fit.selection.k,
                    l: None,
                    families: families(&fit.fits),
                    within_cluster_variability: None,
                });
                logit.insert(key.clone(), fit.forecasts);
            }
        }
        ModelKind::Mfts | ModelKind::Mlfts => {
            panel.require_complete()?;
            let per_group: Vec<Result<(MftsOrMlfts, &String)>> = panel
                .groups
                .par_iter()
                .map(|g| {
                    let f = panel.get(g, Sex::Female)?;
                    let m = panel.get(g, Sex::Male)?;
                    let out = if spec.kind == ModelKind::Mfts {
                        MftsOrMlfts::Mfts(fit_forecast_mfts(f, m, spec.selection, horizon, forecaster)?)
                    } else {
                        MftsOrMlfts::Mlfts(fit_forecast_mlfts(f, m, spec.selection, horizon, forecaster)?)
                    };
                    Ok((out, g))
                })
                .collect();
            for item in per_group {
                let (out, g) = item?;
                match out {
                    MftsOrMlfts::Mfts(fc) => {
                        reports.push(FitReport {
                            model: ModelKind::Mfts,
                            group: Some(g.clone()),
                            sex: None,
                            k: fc.model.selection.k,
                            l: None,
                            families: families(&fc.model.fits),
                            within_cluster_variability: None,
                        });
                        logit.insert((g.clone(), Sex::Female), fc.female);
                        logit.insert((g.clone(), Sex::Male), fc.male);
                    }
                    MftsOrMlfts::Mlfts(fc) => {
                        for (i, s) in Sex::BOTH.iter().enumerate() {
                            let mut fams = families(&fc.model.common_fits);
                            fams.extend(families(&fc.model.specific_fits[i]));
                            reports.push(FitReport {
                                model: ModelKind::Mlfts,
                                group: Some(g.clone()),
                                sex: Some(*s),
                                k: fc.model.common_selection.k,
                                l: Some(fc.model.specific_selection[i].k),
                                families: fams,
                                within_cluster_variability: Some(fc.model.within_cluster_variability[i]),
                            });
                        }
                        logit.insert((g.clone(), Sex::Female), fc.female);
                        logit.insert((g.clone(), Sex::Male), fc.male);
                    }
                }
            }
        }
        ModelKind::Fanova => {
            let fc = fit_forecast_fanova(panel, spec.selection, horizon, forecaster)?;
            for (g, m) in panel.groups.iter().zip(&fc.decomposition.residual_models) {
                reports.push(FitReport {
                    model: ModelKind::Fanova,
                    group: Some(g.clone()),
                    sex: None,
                    k: m.selection.k,
                    l: None,
                    families: families(&m.fits),
                    within_cluster_variability: None,
                });
            }
            logit = fc.forecasts;
        }
        ModelKind::Hdfpca => {
            for sex in panel.sexes() {
                let mats: Vec<DMatrix<f64>> = panel
                    .groups
                    .iter()
                    .map(|g| panel.get(g, sex).cloned())
                    .collect::<Result<_>>()?;
                let fc = fit_forecast_hdfpca(&mats, spec.p0, spec.r, horizon, forecaster)?;
                let fams: Vec<EtsFamily> = fc
                    .model
                    .factor_fits
                    .iter()
                    .flat_map(|f| families(f))
                    .collect();
                reports.push(FitReport {
                    model: ModelKind::Hdfpca,
                    group: None,
                    sex: Some(sex),
                    k: fc.model.p0,
                    l: Some(spec.r),
                    families: fams,
                    within_cluster_variability: None,
                });
                for (g, f) in panel.groups.iter().zip(fc.forecasts) {
                    logit.insert((g.clone(), sex), f);
                }
            }
        }
    }
    Ok(PanelForecast { logit, reports })
}

#[allow(clippy::large_enum_variant)]
enum MftsOrMlfts {
    Mfts(MftsForecast),
    Mlfts(MlftsForecast),
}

/// Point forecasts of death counts for one (group, sex).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityForecast {
    pub model: ModelKind,
    pub group: String,
    pub sex: Sex,
    /// Last year of the training window.
    pub origin: i32,
    /// `horizon × A` counts; row `h - 1` is the h-step-ahead forecast.
    pub values: DMatrix<f64>,
    pub radix: f64,
    /// Rows whose CDF needed monotone rearrangement.
    pub rearranged_rows: usize,
}

impl DensityForecast {
    pub fn horizon(&self) -> usize {
        self.values.nrows()
    }

    pub fn step(&self, h: usize) -> Vec<f64> {
        self.values.row(h - 1).iter().copied().collect()
    }
}

/// Inverts logit-scale forecasts to death counts summing to the radix.
pub fn forecast_density(
    logit: &DMatrix<f64>,
    radix: f64,
    model: ModelKind,
    group: &str,
    sex: Sex,
    origin: i32,
) -> Result<DensityForecast> {
    let inv = from_logit_values(logit, radix)?;
    Ok(DensityForecast {
        model,
        group: group.to_string(),
        sex,
        origin,
        values: inv.densities,
        radix,
        rearranged_rows: inv.rearranged_rows,
    })
}

/// Converts a whole panel forecast to densities.
pub fn panel_densities(
    forecast: &PanelForecast,
    radix: f64,
    model: ModelKind,
    origin: i32,
) -> Result<BTreeMap<(String, Sex), DensityForecast>> {
    forecast
        .logit
        .iter()
        .map(|((g, s), m)| Ok(((g.clone(), *s), forecast_density(m, radix, model, g, *s, origin)?)))
        .collect()
}
