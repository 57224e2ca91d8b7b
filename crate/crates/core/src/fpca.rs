//! Karhunen-Loève decomposition of a discretised functional time series.
//!
//! Functions live on the age grid with unit weights, so the inner product is a
//! plain dot product. Eigenpairs come from the singular value decomposition of
//! the centred data matrix; the sample covariance uses divisor `n - 1`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ets::{EtsFit, ScoreForecaster};

/// Eigenvalues below this fraction of the leading eigenvalue are zero.
pub const RELATIVE_EIGEN_TOLERANCE: f64 = 1e-12;

/// Default fixed number of components.
pub const DEFAULT_FIXED_K: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct FpcaModel {
    /// Pointwise mean function, length `m`.
    pub mean: DVector<f64>,
    /// All `min(n, m)` eigenvalues in descending order, with numerical zeros set to 0.
    pub spectrum: Vec<f64>,
    /// `K × m`; row `k` is the k-th eigenfunction.
    pub eigenfunctions: DMatrix<f64>,
    /// `n × K` projections of the centred rows on the eigenfunctions.
    pub scores: DMatrix<f64>,
    /// `n × m` remainder after all retained components.
    pub residuals: DMatrix<f64>,
    pub n_obs: usize,
}

impl FpcaModel {
    /// Number of components with a positive eigenvalue.
    pub fn n_components(&self) -> usize {
        self.eigenfunctions.nrows()
    }

    /// Positive eigenvalues, one per retained component.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.spectrum[..self.n_components()]
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn total_variance(&self) -> f64 {
        self.spectrum.iter().sum()
    }

    /// Share of total variance per retained component.
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        let total = self.total_variance();
        self.eigenvalues()
            .iter()
            .map(|l| if total > 0.0 { l / total } else { 0.0 })
            .collect()
    }

    /// Mean plus the first `k` components, evaluated at every observation.
    pub fn reconstruct(&self, k: usize) -> DMatrix<f64> {
        let k = k.min(self.n_components());
        let mut out = self.scores.columns(0, k) * self.eigenfunctions.rows(0, k);
        for mut row in out.row_iter_mut() {
            row += self.mean.transpose();
        }
        out
    }

    pub fn score_series(&self, k: usize) -> Vec<f64> {
        self.scores.column(k).iter().copied().collect()
    }
}

/// Fits the decomposition to an `n × m` matrix (rows are observations).
pub fn fit_fpca(data: &DMatrix<f64>) -> Result<FpcaModel> {
    let (n, m) = data.shape();
    if n < 2 {
        return Err(Error::Invalid(format!("FPCA needs at least 2 observations, got {n}")));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("FPCA input"));
    }
    let mean = data.row_mean().transpose();
    let mut centered = data.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }

    let svd = centered.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    // Centring leaves rounding noise of order eps * max|x| per entry.
    let scale = data.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let noise = 100.0 * f64::EPSILON * scale * ((n * m) as f64).sqrt();
    let divisor = (n - 1) as f64;
    let lead = svd.singular_values.get(order[0]).copied().unwrap_or(0.0);
    let mut spectrum = Vec::with_capacity(order.len());
    let mut kept = Vec::new();
    for &i in &order {
        let s = svd.singular_values[i];
        let lambda = s * s / divisor;
        let lead_lambda = lead * lead / divisor;
        if s > noise && lambda > RELATIVE_EIGEN_TOLERANCE * lead_lambda {
            spectrum.push(lambda);
            kept.push(i);
        } else {
            spectrum.push(0.0);
        }
    }

    let k = kept.len();
    let mut eigenfunctions = DMatrix::zeros(k, m);
    for (r, &i) in kept.iter().enumerate() {
        let mut phi: DVector<f64> = v_t.row(i).transpose();
        phi /= phi.norm();
        fix_sign(&mut phi);
        eigenfunctions.set_row(r, &phi.transpose());
    }
    let scores = &centered * eigenfunctions.transpose();
    let residuals = &centered - &scores * &eigenfunctions;
    Ok(FpcaModel {
        mean,
        spectrum,
        eigenfunctions,
        scores,
        residuals,
        n_obs: n,
    })
}

/// Sum of entries nonnegative; first clearly nonzero coordinate positive when the sum vanishes.
fn fix_sign(phi: &mut DVector<f64>) {
    let sum: f64 = phi.iter().sum();
    let l1: f64 = phi.iter().map(|v| v.abs()).sum();
    let flip = if sum.abs() > 1e-10 * l1 {
        sum < 0.0
    } else {
        phi.iter()
            .find(|v| v.abs() > 1e-10 * l1)
            .is_some_and(|v| *v < 0.0)
    };
    if flip {
        phi.neg_mut();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionMethod {
    #[serde(rename = "EVR")]
    Evr,
    #[serde(rename = "FIXED")]
    Fixed,
}

/// How many components to keep, and why.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentSelection {
    pub method: SelectionMethod,
    pub k: usize,
    /// Search bound; for fixed selection, the requested count.
    pub k_max: usize,
    /// Eigenvalue-ratio threshold; NaN for fixed selection.
    pub eta: f64,
    /// Set when a fixed request exceeded the available components.
    pub clamped: bool,
}

/// Eigenvalue-ratio criterion.
///
/// `spectrum` holds eigenvalues in descending order and may include zeros;
/// the k_max threshold averages the spectrum over `n` terms, treating missing
/// eigenvalues as zero.
pub fn select_k_evr(spectrum: &[f64], n: usize) -> ComponentSelection {
    let positive = spectrum.iter().take_while(|l| **l > 0.0).count();
    if positive == 0 {
        return ComponentSelection {
            method: SelectionMethod::Evr,
            k: 0,
            k_max: 0,
            eta: f64::NAN,
            clamped: false,
        };
    }
    let l1 = spectrum[0];
    let eta = 1.0 / l1.max(n as f64).ln();
    let mean = spectrum.iter().sum::<f64>() / n.max(1) as f64;
    let k_max = spectrum.iter().filter(|l| **l >= mean).count().clamp(1, positive);
    let criterion = |k: usize| {
        let lk = spectrum[k - 1];
        if lk / l1 >= eta {
            spectrum.get(k).copied().unwrap_or(0.0) / lk
        } else {
            1.0
        }
    };
    let mut k = 1;
    let mut best = criterion(1);
    for j in 2..=k_max {
        let c = criterion(j);
        if c < best {
            best = c;
            k = j;
        }
    }
    ComponentSelection {
        method: SelectionMethod::Evr,
        k,
        k_max,
        eta,
        clamped: false,
    }
}

/// Fixed count, clamped to what is available.
pub fn select_k_fixed(k: usize, available: usize) -> ComponentSelection {
    let clamped = k > available;
    if clamped {
        log::warn!("requested {k} components but only {available} are available");
    }
    ComponentSelection {
        method: SelectionMethod::Fixed,
        k: k.min(available),
        k_max: k,
        eta: f64::NAN,
        clamped,
    }
}

/// Component-count rule applied to each fitted decomposition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionPolicy {
    #[default]
    Evr,
    Fixed(usize),
}

impl SelectionPolicy {
    pub fn select(&self, model: &FpcaModel) -> ComponentSelection {
        match *self {
            SelectionPolicy::Evr => select_k_evr(&model.spectrum, model.n_obs),
            SelectionPolicy::Fixed(k) => select_k_fixed(k, model.n_components()),
        }
    }
}

impl std::str::FromStr for SelectionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "evr" => Ok(SelectionPolicy::Evr),
            other => other
                .parse::<usize>()
                .ok()
                .filter(|k| *k >= 1)
                .map(SelectionPolicy::Fixed)
                .ok_or_else(|| Error::Invalid(format!("component rule must be `evr` or a positive integer, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for SelectionPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SelectionPolicy::Evr => f.write_str("evr"),
            SelectionPolicy::Fixed(k) => write!(f, "{k}"),
        }
    }
}

/// Forecast scores of the first `k` components and their fitted models.
pub fn forecast_scores(
    model: &FpcaModel,
    k: usize,
    horizon: usize,
    forecaster: &dyn ScoreForecaster,
) -> Result<(DMatrix<f64>, Vec<EtsFit>)> {
    let k = k.min(model.n_components());
    let mut out = DMatrix::zeros(horizon, k);
    let mut fits = Vec::with_capacity(k);
    for j in 0..k {
        let (f, fit) = forecaster.forecast(&model.score_series(j), horizon)?;
        out.set_column(j, &DVector::from_vec(f));
        fits.push(fit);
    }
    Ok((out, fits))
}

/// `mean + Σ_k β̂_{n+h,k} φ_k` for `h = 1..=horizon`, as an `horizon × m` matrix.
pub fn forecast_components(
    model: &FpcaModel,
    selection: &ComponentSelection,
    horizon: usize,
    forecaster: &dyn ScoreForecaster,
) -> Result<(DMatrix<f64>, Vec<EtsFit>)> {
    if horizon < 1 {
        return Err(Error::Invalid("forecast horizon must be at least 1".into()));
    }
    let (scores, fits) = forecast_scores(model, selection.k, horizon, forecaster)?;
    Ok((reconstruct_from_scores(model, &scores), fits))
}

/// `mean + scores · Φ[..k]` where `k` is the number of score columns.
pub fn reconstruct_from_scores(model: &FpcaModel, scores: &DMatrix<f64>) -> DMatrix<f64> {
    let k = scores.ncols();
    let mut out = scores * model.eigenfunctions.rows(0, k);
    for mut row in out.row_iter_mut() {
        row += model.mean.transpose();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ets::{AutoEts, EtsFamily, FixedEts};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rank_one(betas: &[f64], phi: &[f64], mu: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(betas.len(), phi.len(), |t, u| mu[u] + betas[t] * phi[u])
    }

    #[test]
    fn rank_one_recovery() {
        let raw = [1.0, 2.0, -1.0, 0.5];
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let phi: Vec<f64> = raw.iter().map(|v| v / norm).collect();
        let mu = [3.0, -1.0, 0.0, 2.0];
        let model = fit_fpca(&rank_one(&[-1.0, 0.0, 1.0], &phi, &mu)).unwrap();
        assert_eq!(model.n_components(), 1);
        assert!((model.eigenvalues()[0] - 1.0).abs() < 1e-12);
        let sign = model.eigenfunctions[(0, 0)].signum() * phi[0].signum();
        for u in 0..4 {
            assert!((model.eigenfunctions[(0, u)] - sign * phi[u]).abs() < 1e-12);
        }
        let b = [-1.0, 0.0, 1.0];
        for t in 0..3 {
            assert!((model.scores[(t, 0)] - sign * b[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_rows_have_no_components() {
        let data = DMatrix::from_fn(5, 4, |_, u| 0.1 * (u as f64 + 1.0));
        let model = fit_fpca(&data).unwrap();
        assert_eq!(model.n_components(), 0);
        assert!(model.spectrum.iter().all(|l| *l == 0.0));
        assert!(model.residuals.iter().all(|v| v.abs() < 1e-15));
        let sel = select_k_evr(&model.spectrum, 5);
        assert_eq!(sel.k, 0);
        let (f, _) = forecast_components(&model, &sel, 3, &AutoEts).unwrap();
        for h in 0..3 {
            for u in 0..4 {
                assert_eq!(f[(h, u)], model.mean[u]);
            }
        }
    }

    #[test]
    fn decomposition_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = DMatrix::from_fn(12, 20, |_, _| rng.random_range(-1.0..1.0));
        let model = fit_fpca(&data).unwrap();
        let gram = &model.eigenfunctions * model.eigenfunctions.transpose();
        assert!((gram - DMatrix::identity(model.n_components(), model.n_components())).amax() < 1e-8);
        let recon = model.reconstruct(model.n_components()) + &model.residuals;
        assert!((recon - &data).amax() < 1e-10);
        let mut centered = data.clone();
        for mut r in centered.row_iter_mut() {
            r -= model.mean.transpose();
        }
        let total = centered.norm_squared() / 11.0;
        assert!((model.total_variance() - total).abs() < 1e-8);
        assert!(model.spectrum.windows(2).all(|w| w[0] >= w[1]));
        for k in 0..model.n_components() {
            assert!(model.eigenfunctions.row(k).sum() >= 0.0);
        }
    }

    #[test]
    fn evr_examples() {
        let mut ladder = vec![10.0, 0.1, 0.099];
        ladder.extend((0..20).map(|i| 0.05 * 0.8f64.powi(i)));
        assert_eq!(select_k_evr(&ladder, 50).k, 1);

        let mut ladder = vec![5.0, 4.9, 0.01];
        ladder.extend((0..20).map(|i| 0.005 * 0.8f64.powi(i)));
        assert_eq!(select_k_evr(&ladder, 50).k, 2);

        assert_eq!(select_k_evr(&[2.0, 0.0, 0.0], 10).k, 1);
    }

    #[test]
    fn fixed_selection_clamps() {
        assert_eq!(select_k_fixed(6, 10).k, 6);
        let s = select_k_fixed(6, 4);
        assert_eq!(s.k, 4);
        assert!(s.clamped);
        assert_eq!(select_k_fixed(1, 3).k, 1);
    }

    #[test]
    fn constant_scores_extrapolate_flat() {
        // Scores alternate so the component is real, then forecast with a flat model.
        let phi = [0.6, 0.8];
        let data = rank_one(&[1.0, -1.0, 1.0, -1.0, 1.0, -1.0], &phi, &[0.0, 0.0]);
        let model = fit_fpca(&data).unwrap();
        let sel = select_k_fixed(1, model.n_components());
        let flat = FixedEts {
            family: EtsFamily::Ann,
            alpha: 0.5,
            beta: 0.0,
            phi: 0.0,
        };
        let (f, _) = forecast_components(&model, &sel, 2, &flat).unwrap();
        let fit = flat.fit(&model.score_series(0)).unwrap();
        for h in 0..2 {
            for u in 0..2 {
                let expect = model.mean[u] + fit.level * model.eigenfunctions[(0, u)];
                assert!((f[(h, u)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_trend_scores() {
        let phi = [0.6, 0.8, 0.0];
        let betas: Vec<f64> = (0..15).map(|t| t as f64 - 7.0).collect();
        let mu = [1.0, 2.0, 3.0];
        let model = fit_fpca(&rank_one(&betas, &phi, &mu)).unwrap();
        let sel = select_k_evr(&model.spectrum, 15);
        assert_eq!(sel.k, 1);
        let holt = FixedEts {
            family: EtsFamily::Aan,
            alpha: 0.5,
            beta: 0.2,
            phi: 1.0,
        };
        let (f, _) = forecast_components(&model, &sel, 3, &holt).unwrap();
        // noiseless trend: the score at t = 15 + h - 1 is 7 + h
        for h in 1..=3 {
            for u in 0..3 {
                let expect = mu[u] + (7.0 + h as f64) * phi[u];
                assert!((f[(h - 1, u)] - expect).abs() < 1e-6);
            }
        }
    }

    fn brute_force_evr(l: &[f64], n: usize) -> usize {
        let pos = l.iter().filter(|v| **v > 0.0).count();
        let eta = 1.0 / l[0].max(n as f64).ln();
        let mean = l.iter().sum::<f64>() / n as f64;
        let kmax = l.iter().filter(|v| **v >= mean).count().min(pos).max(1);
        let vals: Vec<f64> = (1..=kmax)
            .map(|k| {
                let next = if k < l.len() { l[k] } else { 0.0 };
                if l[k - 1] / l[0] >= eta {
                    next / l[k - 1]
                } else {
                    1.0
                }
            })
            .collect();
        let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        vals.iter().position(|v| *v == min).unwrap() + 1
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn evr_matches_brute_force(raw in prop::collection::vec(1e-3f64..50.0, 1..25), n in 2usize..60) {
            let mut l = raw.clone();
            l.sort_by(|a, b| b.total_cmp(a));
            prop_assert_eq!(select_k_evr(&l, n).k, brute_force_evr(&l, n));
        }

        #[test]
        fn evr_scale_invariant_when_n_dominates(raw in prop::collection::vec(1e-3f64..1.0, 1..20), c in 0.1f64..5.0) {
            let mut l = raw.clone();
            l.sort_by(|a, b| b.total_cmp(a));
            let n = 40;
            let scaled: Vec<f64> = l.iter().map(|v| v * c).collect();
            prop_assume!(scaled[0] < n as f64);
            prop_assert_eq!(select_k_evr(&l, n).k, select_k_evr(&scaled, n).k);
        }
    }
}
