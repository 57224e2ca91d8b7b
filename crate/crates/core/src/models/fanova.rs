use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::mfts::{fit_forecast_mfts, MftsModel};
use super::LogitPanel;
use crate::error::Result;
use crate::ets::ScoreForecaster;
use crate::fpca::SelectionPolicy;
use crate::panel::Sex;

/// Two-way functional ANOVA: `X_{t,s}^g = μ + α_s + β^g + ε_{t,s}^g` with groups
/// as rows `s` and sexes as columns `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct FanovaDecomposition {
    pub grand: DVector<f64>,
    /// One per group, in panel order; they sum to zero at every age.
    pub row_effects: Vec<DVector<f64>>,
    /// Female then male; they sum to zero at every age.
    pub column_effects: [DVector<f64>; 2],
    pub residuals: BTreeMap<(String, Sex), DMatrix<f64>>,
    /// Joint female/male model of the residuals, one per group.
    pub residual_models: Vec<MftsModel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FanovaForecast {
    pub forecasts: BTreeMap<(String, Sex), DMatrix<f64>>,
    pub decomposition: FanovaDecomposition,
}

/// Grand mean, row (group) effects, column (sex) effects and residuals.
pub type FanovaParts = (DVector<f64>, Vec<DVector<f64>>, [DVector<f64>; 2], BTreeMap<(String, Sex), DMatrix<f64>>);

/// Effects and residuals only; no residual models yet.
pub fn fanova_decompose(panel: &LogitPanel) -> Result<FanovaParts> {
    panel.require_complete()?;
    let m = panel.grid.len() - 1;
    let n_groups = panel.groups.len() as f64;

    let time_mean = |x: &DMatrix<f64>| -> DVector<f64> { x.row_mean().transpose() };
    let mut cell_means: BTreeMap<(String, Sex), DVector<f64>> = BTreeMap::new();
    for g in &panel.groups {
        for s in Sex::BOTH {
            cell_means.insert((g.clone(), s), time_mean(panel.get(g, s)?));
        }
    }

    let mut grand = DVector::zeros(m);
    for v in cell_means.values() {
        grand += v;
    }
    grand /= n_groups * 2.0;

    let row_effects: Vec<DVector<f64>> = panel
        .groups
        .iter()
        .map(|g| {
            let sum = &cell_means[&(g.clone(), Sex::Female)] + &cell_means[&(g.clone(), Sex::Male)];
            sum / 2.0 - &grand
        })
        .collect();
    let column_effects = Sex::BOTH.map(|s| {
        let mut sum = DVector::zeros(m);
        for g in &panel.groups {
            sum += &cell_means[&(g.clone(), s)];
        }
        sum / n_groups - &grand
    });

    let mut residuals = BTreeMap::new();
    for (gi, g) in panel.groups.iter().enumerate() {
        for (si, s) in Sex::BOTH.iter().enumerate() {
            let effect = &grand + &row_effects[gi] + &column_effects[si];
            let mut r = panel.get(g, *s)?.clone();
            for mut row in r.row_iter_mut() {
                row -= effect.transpose();
            }
            residuals.insert((g.clone(), *s), r);
        }
    }
    Ok((grand, row_effects, column_effects, residuals))
}

/// Effects are held fixed; residual curves are forecast jointly per group.
pub fn fit_forecast_fanova(
    panel: &LogitPanel,
    policy: SelectionPolicy,
    horizon: usize,
    forecaster: &dyn ScoreForecaster,
) -> Result<FanovaForecast> {
    let (grand, row_effects, column_effects, residuals) = fanova_decompose(panel)?;
    let fits: Vec<Result<_>> = panel
        .groups
        .par_iter()
        .map(|g| {
            let f = &residuals[&(g.clone(), Sex::Female)];
            let m = &residuals[&(g.clone(), Sex::Male)];
            fit_forecast_mfts(f, m, policy, horizon, forecaster)
        })
        .collect();

    let mut forecasts = BTreeMap::new();
    let mut residual_models = Vec::with_capacity(panel.groups.len());
    for (gi, (g, fit)) in panel.groups.iter().zip(fits).enumerate() {
        let fit = fit?;
        for (si, (s, resid_fc)) in [(Sex::Female, &fit.female), (Sex::Male, &fit.male)]
            .into_iter()
            .enumerate()
        {
            let effect = &grand + &row_effects[gi] + &column_effects[si];
            let mut out = resid_fc.clone();
            for mut row in out.row_iter_mut() {
                row += effect.transpose();
            }
            forecasts.insert((g.clone(), s), out);
        }
        residual_models.push(fit.model);
    }
    Ok(FanovaForecast {
        forecasts,
        decomposition: FanovaDecomposition {
            grand,
            row_effects,
            column_effects,
            residuals,
            residual_models,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ets::AutoEts;
    use crate::panel::{AgeGrid, YearRange};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn panel_from(groups: usize, n: usize, m: usize, f: impl Fn(usize, usize, usize, usize) -> f64) -> LogitPanel {
        let names: Vec<String> = (0..groups).map(|g| format!("{g:02}")).collect();
        let mut series = BTreeMap::new();
        for (gi, g) in names.iter().enumerate() {
            for (si, s) in Sex::BOTH.iter().enumerate() {
                series.insert((g.clone(), *s), DMatrix::from_fn(n, m, |t, u| f(gi, si, t, u)));
            }
        }
        LogitPanel {
            groups: names,
            grid: AgeGrid::new(0, m + 1).unwrap(),
            years: YearRange::new(2000, n),
            radix: 1e5,
            series,
        }
    }

    #[test]
    fn homogeneous_panel() {
        let p = panel_from(3, 8, 4, |_, _, _, u| u as f64 * 0.7 - 1.0);
        let fc = fit_forecast_fanova(&p, SelectionPolicy::Evr, 2, &AutoEts).unwrap();
        let d = &fc.decomposition;
        for u in 0..4 {
            assert!((d.grand[u] - (u as f64 * 0.7 - 1.0)).abs() < 1e-12);
        }
        assert!(d.row_effects.iter().all(|e| e.amax() < 1e-12));
        assert!(d.column_effects.iter().all(|e| e.amax() < 1e-12));
        assert!(d.residuals.values().all(|r| r.amax() < 1e-12));
        for f in fc.forecasts.values() {
            for h in 0..2 {
                for u in 0..4 {
                    assert!((f[(h, u)] - (u as f64 * 0.7 - 1.0)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn group_offsets() {
        let g_fn = |u: usize| (u as f64 + 1.0).sin();
        let p = panel_from(2, 6, 5, |g, _, _, u| if g == 0 { g_fn(u) } else { -g_fn(u) });
        let (grand, rows, cols, _) = fanova_decompose(&p).unwrap();
        for u in 0..5 {
            assert!(grand[u].abs() < 1e-12);
            assert!((rows[0][u] - g_fn(u)).abs() < 1e-12);
            assert!((rows[1][u] + g_fn(u)).abs() < 1e-12);
            assert!((rows[0][u] + rows[1][u]).abs() < 1e-10);
            assert!((cols[0][u] + cols[1][u]).abs() < 1e-10);
        }
    }

    #[test]
    fn effects_match_direct_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let vals: Vec<f64> = (0..4 * 2 * 7 * 3).map(|_| rng.random_range(-5.0..5.0)).collect();
        let idx = |g: usize, s: usize, t: usize, u: usize| ((g * 2 + s) * 7 + t) * 3 + u;
        let p = panel_from(4, 7, 3, |g, s, t, u| vals[idx(g, s, t, u)]);
        let (grand, rows, cols, resid) = fanova_decompose(&p).unwrap();
        for u in 0..3 {
            let mut total = 0.0;
            for g in 0..4 {
                for s in 0..2 {
                    for t in 0..7 {
                        total += vals[idx(g, s, t, u)];
                    }
                }
            }
            let mu = total / (4.0 * 2.0 * 7.0);
            assert!((grand[u] - mu).abs() < 1e-12);
            for g in 0..4 {
                let mut sum = 0.0;
                for s in 0..2 {
                    for t in 0..7 {
                        sum += vals[idx(g, s, t, u)];
                    }
                }
                assert!((rows[g][u] - (sum / 14.0 - mu)).abs() < 1e-12);
            }
            for s in 0..2 {
                let mut sum = 0.0;
                for g in 0..4 {
                    for t in 0..7 {
                        sum += vals[idx(g, s, t, u)];
                    }
                }
                assert!((cols[s][u] - (sum / 28.0 - mu)).abs() < 1e-12);
            }
            let r = &resid[&("02".to_string(), Sex::Male)];
            let expect = vals[idx(2, 1, 4, u)] - grand[u] - rows[2][u] - cols[1][u];
            assert!((r[(4, u)] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn incomplete_panel_named() {
        let mut p = panel_from(2, 5, 3, |_, _, t, u| (t * u) as f64);
        p.series.remove(&("01".to_string(), Sex::Male));
        let err = fit_forecast_fanova(&p, SelectionPolicy::Evr, 1, &AutoEts).unwrap_err();
        assert!(err.to_string().contains("(01, M)"), "{err}");
    }
}
