use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ets::{EtsFit, ScoreForecaster};
use crate::fpca::{fit_fpca, FpcaModel};

/// Factor model for an `n × P` panel of scores: `S = 1 mean' + F L' + E`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    /// Column means of the score panel, length `P`.
    pub mean: DVector<f64>,
    /// `P × r` with orthonormal columns.
    pub loadings: DMatrix<f64>,
    /// `n × r` projections of the centred scores on the loadings.
    pub factors: DMatrix<f64>,
    /// `n × P` idiosyncratic remainder.
    pub idiosyncratic: DMatrix<f64>,
    /// Eigenvalues of the score covariance, descending.
    pub eigenvalues: Vec<f64>,
}

impl FactorModel {
    /// `mean + factors · loadings'` for each row of `factors`.
    pub fn reconstruct(&self, factors: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = factors * self.loadings.transpose();
        for mut row in out.row_iter_mut() {
            row += self.mean.transpose();
        }
        out
    }
}

/// Loadings are the top-`r` eigenvectors of the `P × P` sample covariance.
pub fn fit_factor_model(scores: &DMatrix<f64>, r: usize) -> Result<FactorModel> {
    let (n, p) = scores.shape();
    if r > p {
        return Err(Error::Invalid(format!("{r} factors requested for {p} series")));
    }
    if n < 2 {
        return Err(Error::Invalid("factor model needs at least 2 observations".into()));
    }
    let mean = scores.row_mean().transpose();
    let mut centred = scores.clone();
    for mut row in centred.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centred.transpose() * &centred / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut loadings = DMatrix::zeros(p, r);
    for (j, &i) in order.iter().take(r).enumerate() {
        let mut v: DVector<f64> = eig.eigenvectors.column(i).into_owned();
        let s: f64 = v.iter().sum();
        if s < 0.0 {
            v.neg_mut();
        }
        loadings.set_column(j, &v);
    }
    let factors = &centred * &loadings;
    let idiosyncratic = &centred - &factors * loadings.transpose();
    Ok(FactorModel {
        mean,
        loadings,
        factors,
        idiosyncratic,
        eigenvalues: order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect(),
    })
}

/// Per-series decompositions plus one factor model per score index.
#[derive(Debug, Clone, PartialEq)]
pub struct HdfpcaModel {
    pub stage1: Vec<FpcaModel>,
    /// Score indices modelled; series with fewer components contribute zeros.
    pub p0: usize,
    pub factor_models: Vec<FactorModel>,
    pub factor_fits: Vec<Vec<EtsFit>>,
}

impl HdfpcaModel {
    /// `n × P` panel of the j-th scores, zero where a series has no j-th component.
    pub fn score_panel(stage1: &[FpcaModel], j: usize) -> DMatrix<f64> {
        let n = stage1[0].n_obs;
        DMatrix::from_fn(n, stage1.len(), |t, p| {
            let m = &stage1[p];
            if j < m.n_components() {
                m.scores[(t, j)]
            } else {
                0.0
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HdfpcaForecast {
    /// One `horizon × m` matrix per series, input order.
    pub forecasts: Vec<DMatrix<f64>>,
    /// Score forecasts rebuilt from the factors: `horizon × P` per score index.
    pub score_forecasts: Vec<DMatrix<f64>>,
    pub model: HdfpcaModel,
}

/// Stage 1: FPCA per series with `p0` scores. Stage 2: `r` factors per score
/// index across series. Stage 3: forecast factors and rebuild curves.
pub fn fit_forecast_hdfpca(
    series: &[DMatrix<f64>],
    p0: usize,
    r: usize,
    horizon: usize,
    forecaster: &dyn ScoreForecaster,
) -> Result<HdfpcaForecast> {
    let p = series.len();
    if p < 2 {
        return Err(Error::Invalid(format!("HDFPCA needs at least 2 series, got {p}")));
    }
    if r > p {
        return Err(Error::Invalid(format!("{r} factors requested for {p} series")));
    }
    if horizon < 1 {
        return Err(Error::Invalid("forecast horizon must be at least 1".into()));
    }
    let shape = series[0].shape();
    if series.iter().any(|s| s.shape() != shape) {
        return Err(Error::Shape("HDFPCA series must share years and ages".into()));
    }

    let stage1: Vec<FpcaModel> = series
        .par_iter()
        .map(fit_fpca)
        .collect::<Result<_>>()?;

    #[allow(clippy::type_complexity)]
    let per_index: Vec<Result<(FactorModel, Vec<EtsFit>, DMatrix<f64>)>> = (0..p0)
        .into_par_iter()
        .map(|j| {
            let panel = HdfpcaModel::score_panel(&stage1, j);
            let fm = fit_factor_model(&panel, r)?;
            let mut f_hat = DMatrix::zeros(horizon, r);
            let mut fits = Vec::with_capacity(r);
            for c in 0..r {
                let col: Vec<f64> = fm.factors.column(c).iter().copied().collect();
                let (f, fit) = forecaster.forecast(&col, horizon)?;
                f_hat.set_column(c, &DVector::from_vec(f));
                fits.push(fit);
            }
            let scores = fm.reconstruct(&f_hat);
            Ok((fm, fits, scores))
        })
        .collect();

    let mut factor_models = Vec::with_capacity(p0);
    let mut factor_fits = Vec::with_capacity(p0);
    let mut score_forecasts = Vec::with_capacity(p0);
    for item in per_index {
        let (fm, fits, scores) = item?;
        factor_models.push(fm);
        factor_fits.push(fits);
        score_forecasts.push(scores);
    }

    let forecasts = stage1
        .iter()
        .enumerate()
        .map(|(i, model)| {
            let k = model.n_components().min(p0);
            let scores = DMatrix::from_fn(horizon, k, |h, j| score_forecasts[j][(h, i)]);
            crate::fpca::reconstruct_from_scores(model, &scores)
        })
        .collect();

    Ok(HdfpcaForecast {
        forecasts,
        score_forecasts,
        model: HdfpcaModel {
            stage1,
            p0,
            factor_models,
            factor_fits,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ets::{AutoEts, EtsFamily, FixedEts};
    use crate::fpca::SelectionPolicy;
    use crate::models::fit_forecast_ufts;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_series(rng: &mut ChaCha8Rng, n: usize, m: usize) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(n, m);
        for t in 0..n {
            for u in 0..m {
                let prev = if t > 0 { x[(t - 1, u)] } else { u as f64 * 0.1 };
                x[(t, u)] = prev + rng.random_range(-0.3..0.3) - 0.05;
            }
        }
        x
    }

    #[test]
    fn too_many_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = vec![random_series(&mut rng, 10, 4), random_series(&mut rng, 10, 4)];
        assert!(fit_forecast_hdfpca(&s, 3, 3, 2, &AutoEts).is_err());
    }

    #[test]
    fn identical_series_reduce_to_ufts() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_series(&mut rng, 16, 6);
        let s = vec![x.clone(), x.clone(), x.clone()];
        let fc = fit_forecast_hdfpca(&s, 3, 1, 4, &AutoEts).unwrap();
        let u = fit_forecast_ufts(&x, SelectionPolicy::Fixed(3), 4, &AutoEts).unwrap();
        for f in &fc.forecasts {
            assert!((f - &u.forecasts).amax() < 1e-6);
        }
    }

    #[test]
    fn degenerate_second_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = random_series(&mut rng, 16, 5);
        let s = vec![x.clone(), x.clone()];
        let one = fit_forecast_hdfpca(&s, 2, 1, 3, &AutoEts).unwrap();
        let two = fit_forecast_hdfpca(&s, 2, 2, 3, &AutoEts).unwrap();
        for (a, b) in one.forecasts.iter().zip(&two.forecasts) {
            assert!((a - b).amax() < 1e-8);
        }
    }

    #[test]
    fn two_factor_space_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (n, p) = (30, 6);
        let f: DMatrix<f64> = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
        let raw = DMatrix::from_fn(p, 2, |_, _| rng.random_range(-1.0..1.0));
        let q = raw.qr().q();
        let scores = &f * q.transpose();
        let fm = fit_factor_model(&scores, 2).unwrap();
        // sin of largest principal angle between span(q) and span(loadings)
        let resid = &q - &fm.loadings * (fm.loadings.transpose() * &q);
        assert!(resid.norm() < 1e-6);
        let gram = fm.loadings.transpose() * &fm.loadings;
        assert!((gram - DMatrix::identity(2, 2)).amax() < 1e-12);
        let recon = fm.reconstruct(&fm.factors) + &fm.idiosyncratic;
        assert!((recon - &scores).amax() < 1e-12);
        assert!(fm.idiosyncratic.amax() < 1e-10);
    }

    #[test]
    fn full_rank_is_a_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let s: Vec<_> = (0..3).map(|_| random_series(&mut rng, 14, 5)).collect();
        let lin = FixedEts {
            family: EtsFamily::Aan,
            alpha: 0.5,
            beta: 0.2,
            phi: 1.0,
        };
        let fc = fit_forecast_hdfpca(&s, 2, 3, 3, &lin).unwrap();
        for j in 0..2 {
            let panel = HdfpcaModel::score_panel(&fc.model.stage1, j);
            for i in 0..3 {
                let col: Vec<f64> = panel.column(i).iter().copied().collect();
                let (direct, _) = lin.forecast(&col, 3).unwrap();
                for h in 0..3 {
                    assert!((fc.score_forecasts[j][(h, i)] - direct[h]).abs() < 1e-8);
                }
            }
        }
    }
}
