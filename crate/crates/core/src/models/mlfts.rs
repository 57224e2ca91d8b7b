use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ets::{EtsFit, ScoreForecaster};
use crate::fpca::{fit_fpca, forecast_components, ComponentSelection, FpcaModel, SelectionPolicy};

/// Common-plus-specific decomposition of a female/male pair.
///
/// With `X_g` the centred curves of sex `g`, the common series is
/// `R = (X_F + X_M) / 2` and the sex-specific series are `U_g = X_g - R`.
/// Each is decomposed separately.
#[derive(Debug, Clone, PartialEq)]
pub struct MlftsModel {
    /// Per-sex means, female first.
    pub means: [DVector<f64>; 2],
    pub common: FpcaModel,
    pub common_selection: ComponentSelection,
    pub common_fits: Vec<EtsFit>,
    pub specific: [FpcaModel; 2],
    pub specific_selection: [ComponentSelection; 2],
    pub specific_fits: [Vec<EtsFit>; 2],
    /// Share of retained variance explained by the common part, per sex.
    pub within_cluster_variability: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlftsForecast {
    pub female: DMatrix<f64>,
    pub male: DMatrix<f64>,
    pub model: MlftsModel,
}

/// `Σ_{k≤K} λ_c / (Σ_{k≤K} λ_c + Σ_{l≤L} λ_g)`; 1 when nothing varies.
pub fn within_cluster_variability(
    common: &FpcaModel,
    k: usize,
    specific: &FpcaModel,
    l: usize,
) -> f64 {
    let c: f64 = common.eigenvalues().iter().take(k).sum();
    let s: f64 = specific.eigenvalues().iter().take(l).sum();
    if c + s > 0.0 {
        c / (c + s)
    } else {
        1.0
    }
}

pub fn fit_forecast_mlfts(
    female: &DMatrix<f64>,
    male: &DMatrix<f64>,
    policy: SelectionPolicy,
    horizon: usize,
    forecaster: &dyn ScoreForecaster,
) -> Result<MlftsForecast> {
    if female.shape() != male.shape() {
        return Err(Error::Shape(format!(
            "female series is {:?} but male series is {:?}",
            female.shape(),
            male.shape()
        )));
    }
    let centre = |x: &DMatrix<f64>| {
        let mean = x.row_mean().transpose();
        let mut c = x.clone();
        for mut row in c.row_iter_mut() {
            row -= mean.transpose();
        }
        (mean, c)
    };
    let (mean_f, cf) = centre(female);
    let (mean_m, cm) = centre(male);
    let common_series = (&cf + &cm) * 0.5;

    let common = fit_fpca(&common_series)?;
    let common_selection = policy.select(&common);
    let (common_fc, common_fits) = forecast_components(&common, &common_selection, horizon, forecaster)?;

    let mut specific = Vec::with_capacity(2);
    let mut specific_selection = Vec::with_capacity(2);
    let mut specific_fits = Vec::with_capacity(2);
    let mut outputs = Vec::with_capacity(2);
    for (mean, centred) in [(&mean_f, &cf), (&mean_m, &cm)] {
        let u = centred - &common_series;
        let model = fit_fpca(&u)?;
        let sel = policy.select(&model);
        let (fc, fits) = forecast_components(&model, &sel, horizon, forecaster)?;
        let mut out = &common_fc + fc;
        for mut row in out.row_iter_mut() {
            row += mean.transpose();
        }
        outputs.push(out);
        specific.push(model);
        specific_selection.push(sel);
        specific_fits.push(fits);
    }

    let wcv = [
        within_cluster_variability(&common, common_selection.k, &specific[0], specific_selection[0].k),
        within_cluster_variability(&common, common_selection.k, &specific[1], specific_selection[1].k),
    ];
    let male_out = outputs.pop().expect("two outputs");
    let female_out = outputs.pop().expect("two outputs");
    let sm = specific.pop().expect("two models");
    let sf = specific.pop().expect("two models");
    let fm = specific_fits.pop().expect("two fit sets");
    let ff = specific_fits.pop().expect("two fit sets");
    Ok(MlftsForecast {
        female: female_out,
        male: male_out,
        model: MlftsModel {
            means: [mean_f, mean_m],
            common,
            common_selection,
            common_fits,
            specific: [sf, sm],
            specific_selection: [specific_selection[0], specific_selection[1]],
            specific_fits: [ff, fm],
            within_cluster_variability: wcv,
        },
    })
}
