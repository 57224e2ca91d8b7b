use nalgebra::DMatrix;

use crate::error::Result;
use crate::ets::{EtsFit, ScoreForecaster};
use crate::fpca::{fit_fpca, forecast_components, ComponentSelection, FpcaModel, SelectionPolicy};

/// One series modelled on its own.
#[derive(Debug, Clone, PartialEq)]
pub struct UftsForecast {
    /// `horizon × m` logit-scale forecasts.
    pub forecasts: DMatrix<f64>,
    pub model: FpcaModel,
    pub selection: ComponentSelection,
    pub fits: Vec<EtsFit>,
}

pub fn fit_forecast_ufts(
    series: &DMatrix<f64>,
    policy: SelectionPolicy,
    horizon: usize,
    forecaster: &dyn ScoreForecaster,
) -> Result<UftsForecast> {
    let model = fit_fpca(series)?;
    let selection = policy.select(&model);
    let (forecasts, fits) = forecast_components(&model, &selection, horizon, forecaster)?;
    Ok(UftsForecast {
        forecasts,
        model,
        selection,
        fits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ets::{AutoEts, EtsFamily, FixedEts};

    #[test]
    fn constant_series() {
        let x = DMatrix::from_fn(8, 4, |_, u| u as f64 - 1.5);
        let f = fit_forecast_ufts(&x, SelectionPolicy::Evr, 4, &AutoEts).unwrap();
        assert_eq!(f.selection.k, 0);
        for h in 0..4 {
            for u in 0..4 {
                assert!((f.forecasts[(h, u)] - (u as f64 - 1.5)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rank_one_trend_matches_holt() {
        let phi = [0.0, 0.6, 0.8];
        let mu = [-2.0, 0.0, 1.0];
        let beta = |t: usize| 0.5 * t as f64 - 3.0;
        let x = DMatrix::from_fn(12, 3, |t, u| mu[u] + beta(t) * phi[u]);
        let holt = FixedEts {
            family: EtsFamily::Aan,
            alpha: 0.3,
            beta: 0.1,
            phi: 1.0,
        };
        let f = fit_forecast_ufts(&x, SelectionPolicy::Evr, 3, &holt).unwrap();
        assert_eq!(f.selection.k, 1);
        for h in 1..=3 {
            for u in 0..3 {
                let expect = mu[u] + beta(11 + h) * phi[u];
                assert!((f.forecasts[(h - 1, u)] - expect).abs() < 1e-6);
            }
        }
    }
}
