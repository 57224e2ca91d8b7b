use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::ets::{EtsFit, ScoreForecaster};
use crate::fpca::{fit_fpca, forecast_components, ComponentSelection, FpcaModel, SelectionPolicy};

/// Female and male curves stacked end to end and decomposed jointly.
#[derive(Debug, Clone, PartialEq)]
pub struct MftsModel {
    /// Joint decomposition over `2m` points; its mean is `[ν_F, ν_M]`.
    pub fpca: FpcaModel,
    /// One component count shared by both sexes.
    pub selection: ComponentSelection,
    pub fits: Vec<EtsFit>,
    /// Points per sex.
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MftsForecast {
    pub female: DMatrix<f64>,
    pub male: DMatrix<f64>,
    pub model: MftsModel,
}

pub fn fit_forecast_mfts(
    female: &DMatrix<f64>,
    male: &DMatrix<f64>,
    policy: SelectionPolicy,
    horizon: usize,
    forecaster: &dyn ScoreForecaster,
) -> Result<MftsForecast> {
    if female.shape() != male.shape() {
        return Err(Error::Shape(format!(
            "female series is {:?} but male series is {:?}",
            female.shape(),
            male.shape()
        )));
    }
    let (n, m) = female.shape();
    let mut stacked = DMatrix::zeros(n, 2 * m);
    stacked.columns_mut(0, m).copy_from(female);
    stacked.columns_mut(m, m).copy_from(male);

    // Column means of the stacked matrix are the per-sex means.
    let fpca = fit_fpca(&stacked)?;
    let selection = policy.select(&fpca);
    let (joint, fits) = forecast_components(&fpca, &selection, horizon, forecaster)?;
    Ok(MftsForecast {
        female: joint.columns(0, m).into_owned(),
        male: joint.columns(m, m).into_owned(),
        model: MftsModel {
            fpca,
            selection,
            fits,
            dim: m,
        },
    })
}
