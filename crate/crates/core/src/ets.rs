//! Exponential-smoothing forecasts of principal-component scores.
//!
//! Three additive-error, non-seasonal state-space members are fitted by
//! Gaussian maximum likelihood and the one with the smallest corrected AIC is
//! kept:
//!
//! | member | level update                  | trend update         | forecast             |
//! |--------|-------------------------------|----------------------|----------------------|
//! | ANN    | `l += α e`                    |                      | `l`                  |
//! | AAN    | `l += b + α e`                | `b += β e`           | `l + h b`            |
//! | AAdN   | `l += φ b + α e`              | `b = φ b + β e`      | `l + b Σ_{i≤h} φ^i`  |
//!
//! The one-step residuals are linear in the initial states, so for fixed
//! smoothing parameters the initial level and trend are solved exactly by
//! least squares; Nelder-Mead only searches the smoothing parameters.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ALPHA_BOUNDS: (f64, f64) = (1e-4, 0.9999);
/// Bounds on `β / α`, which keeps `0 < β < α`.
pub const BETA_RATIO_BOUNDS: (f64, f64) = (1e-4, 0.9999);
pub const PHI_BOUNDS: (f64, f64) = (0.8, 0.98);

/// Minimum series length for an optimised fit.
pub const MIN_OBSERVATIONS: usize = 4;
pub const FALLBACK_ALPHA: f64 = 0.5;

pub const NM_TOLERANCE: f64 = 1e-8;
pub const NM_MAX_ITER: usize = 2000;

/// Restart points in (α, β/α, φ).
pub const RESTARTS: [[f64; 3]; 3] = [[0.5, 0.1, 0.9], [0.2, 0.5, 0.95], [0.8, 0.05, 0.85]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EtsFamily {
    #[serde(rename = "ANN")]
    Ann,
    #[serde(rename = "AAN")]
    Aan,
    #[serde(rename = "AAdN")]
    AAdN,
}

impl EtsFamily {
    pub const ALL: [EtsFamily; 3] = [EtsFamily::Ann, EtsFamily::Aan, EtsFamily::AAdN];

    fn n_smoothing(self) -> usize {
        match self {
            EtsFamily::Ann => 1,
            EtsFamily::Aan => 2,
            EtsFamily::AAdN => 3,
        }
    }

    fn n_states(self) -> usize {
        match self {
            EtsFamily::Ann => 1,
            _ => 2,
        }
    }

    /// Smoothing parameters, initial states and the innovation variance.
    pub fn n_params(self) -> usize {
        self.n_smoothing() + self.n_states() + 1
    }
}

impl fmt::Display for EtsFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EtsFamily::Ann => "ANN",
            EtsFamily::Aan => "AAN",
            EtsFamily::AAdN => "AAdN",
        })
    }
}

impl FromStr for EtsFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ANN" => Ok(EtsFamily::Ann),
            "AAN" => Ok(EtsFamily::Aan),
            "AAdN" => Ok(EtsFamily::AAdN),
            _ => Err(Error::Invalid(format!("unknown ETS family `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Params {
    alpha: f64,
    beta: f64,
    phi: f64,
}

impl Params {
    fn for_family(family: EtsFamily, alpha: f64, beta: f64, phi: f64) -> Self {
        match family {
            EtsFamily::Ann => Params {
                alpha,
                beta: 0.0,
                phi: 0.0,
            },
            EtsFamily::Aan => Params { alpha, beta, phi: 1.0 },
            EtsFamily::AAdN => Params { alpha, beta, phi },
        }
    }
}

/// A fitted exponential-smoothing model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtsFit {
    pub family: EtsFamily,
    pub alpha: f64,
    pub beta: Option<f64>,
    pub phi: Option<f64>,
    pub initial_level: f64,
    pub initial_trend: Option<f64>,
    /// States after the last observation.
    pub level: f64,
    pub trend: f64,
    /// Maximum-likelihood innovation variance, `SSE / n`.
    pub sigma2: f64,
    pub log_likelihood: f64,
    pub aicc: f64,
    pub n_obs: usize,
    /// Set when the series was too short for an optimised fit.
    pub fallback: bool,
    #[serde(skip)]
    pub residuals: Vec<f64>,
}

impl EtsFit {
    /// Point forecasts for steps `1..=horizon`.
    pub fn forecast(&self, horizon: usize) -> Result<Vec<f64>> {
        if horizon < 1 {
            return Err(Error::Invalid("forecast horizon must be at least 1".into()));
        }
        Ok(match self.family {
            EtsFamily::Ann => vec![self.level; horizon],
            EtsFamily::Aan => (1..=horizon)
                .map(|h| self.level + h as f64 * self.trend)
                .collect(),
            EtsFamily::AAdN => {
                let phi = self.phi.unwrap_or(1.0);
                let mut damp = 0.0;
                let mut pow = 1.0;
                (1..=horizon)
                    .map(|_| {
                        pow *= phi;
                        damp += pow;
                        self.level + damp * self.trend
                    })
                    .collect()
            }
        })
    }

    /// One-step-ahead in-sample predictions obtained by replaying the state recursion on `y`.
    pub fn one_step_fitted(&self, y: &[f64]) -> Vec<f64> {
        let p = Params::for_family(
            self.family,
            self.alpha,
            self.beta.unwrap_or(0.0),
            self.phi.unwrap_or(0.0),
        );
        let x0 = [self.initial_level, self.initial_trend.unwrap_or(0.0)];
        let mut fitted = Vec::with_capacity(y.len());
        run(y, x0, p, |pred, _| fitted.push(pred));
        fitted
    }

    /// Builds a model from explicit states and parameters, e.g. for testing forecasts.
    pub fn from_states(family: EtsFamily, level: f64, trend: f64, phi: Option<f64>) -> Self {
        EtsFit {
            family,
            alpha: FALLBACK_ALPHA,
            beta: None,
            phi,
            initial_level: level,
            initial_trend: Some(trend),
            level,
            trend,
            sigma2: 0.0,
            log_likelihood: f64::NAN,
            aicc: f64::NAN,
            n_obs: 0,
            fallback: false,
            residuals: Vec::new(),
        }
    }
}

/// Anything that turns a univariate score series into a fitted forecaster.
pub trait ScoreForecaster: Send + Sync {
    fn fit(&self, series: &[f64]) -> Result<EtsFit>;

    fn forecast(&self, series: &[f64], horizon: usize) -> Result<(Vec<f64>, EtsFit)> {
        let fit = self.fit(series)?;
        Ok((fit.forecast(horizon)?, fit))
    }
}

/// Automatic selection among ANN, AAN and AAdN by corrected AIC.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AutoEts;

impl ScoreForecaster for AutoEts {
    fn fit(&self, series: &[f64]) -> Result<EtsFit> {
        fit_ets(series)
    }
}

/// Fixed family and smoothing parameters; only the initial states are estimated.
///
/// The resulting forecast is a linear function of the series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedEts {
    pub family: EtsFamily,
    pub alpha: f64,
    pub beta: f64,
    pub phi: f64,
}

impl ScoreForecaster for FixedEts {
    fn fit(&self, series: &[f64]) -> Result<EtsFit> {
        check_finite(series)?;
        if series.is_empty() {
            return Err(Error::Invalid("empty score series".into()));
        }
        let p = Params::for_family(self.family, self.alpha, self.beta, self.phi);
        Ok(finish_fit(series, self.family, p, false))
    }
}

fn check_finite(y: &[f64]) -> Result<()> {
    if y.iter().any(|v| !v.is_finite()) {
        Err(Error::NonFinite("score series"))
    } else {
        Ok(())
    }
}

/// Fits all three members and returns the one with the smallest AICc.
pub fn fit_ets(y: &[f64]) -> Result<EtsFit> {
    let candidates = fit_candidates(y)?;
    Ok(select_by_aicc(candidates))
}

/// Every candidate fit, in family order. Short series yield only the fallback.
pub fn fit_candidates(y: &[f64]) -> Result<Vec<EtsFit>> {
    check_finite(y)?;
    if y.is_empty() {
        return Err(Error::Invalid("empty score series".into()));
    }
    if y.len() < MIN_OBSERVATIONS {
        let p = Params::for_family(EtsFamily::Ann, FALLBACK_ALPHA, 0.0, 0.0);
        return Ok(vec![finish_fit(y, EtsFamily::Ann, p, true)]);
    }
    Ok(EtsFamily::ALL
        .iter()
        .map(|&family| fit_family(y, family))
        .collect())
}

fn select_by_aicc(candidates: Vec<EtsFit>) -> EtsFit {
    let mut best: Option<EtsFit> = None;
    for c in &candidates {
        if c.aicc.is_finite() && best.as_ref().is_none_or(|b| c.aicc < b.aicc) {
            best = Some(c.clone());
        }
    }
    best.unwrap_or_else(|| {
        // Too few observations for any finite penalty: keep the simplest member.
        let mut ann = candidates
            .into_iter()
            .find(|c| c.family == EtsFamily::Ann)
            .expect("ANN is always a candidate");
        ann.fallback = true;
        ann
    })
}

/// Maximum-likelihood fit of a single member.
pub fn fit_family(y: &[f64], family: EtsFamily) -> EtsFit {
    let floor = variance_floor(y);
    let objective = |theta: &[f64]| {
        let p = params_from_theta(family, theta);
        let (sse, _) = profile_initial_states(y, family, p);
        0.5 * y.len() as f64 * (sse / y.len() as f64).max(floor).ln()
    };
    let dim = family.n_smoothing();
    let mut best: Option<(Vec<f64>, f64)> = None;
    for start in RESTARTS {
        let theta0: Vec<f64> = theta_from_params(family, start)[..dim].to_vec();
        let (theta, value) = nelder_mead(&objective, &theta0, 0.6, NM_TOLERANCE, NM_MAX_ITER);
        if best.as_ref().is_none_or(|(_, v)| value < *v) {
            best = Some((theta, value));
        }
    }
    let (theta, _) = best.expect("at least one restart");
    let p = params_from_theta(family, &theta);
    finish_fit(y, family, p, false)
}

fn variance_floor(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (1e-16 * var).max(1e-290)
}

fn finish_fit(y: &[f64], family: EtsFamily, p: Params, fallback: bool) -> EtsFit {
    let (_, x0) = profile_initial_states(y, family, p);
    let mut residuals = Vec::with_capacity(y.len());
    let state = run(y, x0, p, |pred, obs| residuals.push(obs - pred));
    let n = y.len();
    let sse: f64 = residuals.iter().map(|e| e * e).sum();
    let sigma2 = (sse / n as f64).max(variance_floor(y));
    let log_likelihood = -0.5 * n as f64 * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0);
    let k = family.n_params() as f64;
    let nf = n as f64;
    let aicc = if nf - k - 1.0 > 0.0 {
        -2.0 * log_likelihood + 2.0 * k * nf / (nf - k - 1.0)
    } else {
        f64::INFINITY
    };
    EtsFit {
        family,
        alpha: p.alpha,
        beta: (family != EtsFamily::Ann).then_some(p.beta),
        phi: (family == EtsFamily::AAdN).then_some(p.phi),
        initial_level: x0[0],
        initial_trend: (family != EtsFamily::Ann).then_some(x0[1]),
        level: state[0],
        trend: state[1],
        sigma2,
        log_likelihood,
        aicc,
        n_obs: n,
        fallback,
        residuals,
    }
}

/// Runs the additive-error recursion from `x0`, calling `visit(prediction, observation)` per step.
/// Returns the final (level, trend).
fn run(y: &[f64], x0: [f64; 2], p: Params, mut visit: impl FnMut(f64, f64)) -> [f64; 2] {
    let (mut l, mut b) = (x0[0], x0[1]);
    for &obs in y {
        let pred = l + p.phi * b;
        visit(pred, obs);
        let e = obs - pred;
        l = pred + p.alpha * e;
        b = p.phi * b + p.beta * e;
    }
    [l, b]
}

/// Least-squares initial states for fixed smoothing parameters; returns (SSE, states).
fn profile_initial_states(y: &[f64], family: EtsFamily, p: Params) -> (f64, [f64; 2]) {
    let n = y.len();
    let d = family.n_states();
    let mut base = Vec::with_capacity(n);
    run(y, [0.0, 0.0], p, |pred, obs| base.push(obs - pred));
    let zeros = vec![0.0; n];
    let mut design = DMatrix::zeros(n, d);
    for j in 0..d {
        let mut x0 = [0.0, 0.0];
        x0[j] = 1.0;
        let mut t = 0;
        run(&zeros, x0, p, |pred, _| {
            design[(t, j)] = pred;
            t += 1;
        });
    }
    // residual(x0) = base - design * x0
    let rhs = DVector::from_vec(base);
    let svd = design.clone().svd(true, true);
    let eps = 1e-12 * svd.singular_values.max().max(f64::MIN_POSITIVE);
    let sol = svd
        .solve(&rhs, eps)
        .unwrap_or_else(|_| DVector::zeros(d));
    let resid = &rhs - &design * &sol;
    let mut x0 = [0.0, 0.0];
    for j in 0..d {
        x0[j] = sol[j];
    }
    (resid.norm_squared(), x0)
}

fn to_unit(v: f64, (lo, hi): (f64, f64)) -> f64 {
    let u = ((v - lo) / (hi - lo)).clamp(1e-9, 1.0 - 1e-9);
    (u / (1.0 - u)).ln()
}

fn from_unit(t: f64, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * crate::cdf::inv_logit(t)
}

fn theta_from_params(_family: EtsFamily, start: [f64; 3]) -> [f64; 3] {
    [
        to_unit(start[0], ALPHA_BOUNDS),
        to_unit(start[1], BETA_RATIO_BOUNDS),
        to_unit(start[2], PHI_BOUNDS),
    ]
}

fn params_from_theta(family: EtsFamily, theta: &[f64]) -> Params {
    let alpha = from_unit(theta[0], ALPHA_BOUNDS);
    let beta = theta
        .get(1)
        .map(|t| alpha * from_unit(*t, BETA_RATIO_BOUNDS))
        .unwrap_or(0.0);
    let phi = theta.get(2).map(|t| from_unit(*t, PHI_BOUNDS)).unwrap_or(1.0);
    Params::for_family(family, alpha, beta, phi)
}

/// Nelder-Mead minimisation with standard coefficients. Stops when the spread of
/// objective values across the simplex falls below `tol`.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(
    f: &F,
    x0: &[f64],
    step: f64,
    tol: f64,
    max_iter: usize,
) -> (Vec<f64>, f64) {
    let dim = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..dim {
        let mut v = x0.to_vec();
        v[i] += step;
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();

    for _ in 0..max_iter {
        let mut order: Vec<usize> = (0..=dim).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        if (values[dim] - values[0]).abs() <= tol {
            break;
        }

        let centroid: Vec<f64> = (0..dim)
            .map(|j| simplex[..dim].iter().map(|v| v[j]).sum::<f64>() / dim as f64)
            .collect();
        let along = |coef: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[dim])
                .map(|(c, w)| c + coef * (c - w))
                .collect()
        };

        let reflected = along(1.0);
        let fr = f(&reflected);
        if fr < values[0] {
            let expanded = along(2.0);
            let fe = f(&expanded);
            if fe < fr {
                simplex[dim] = expanded;
                values[dim] = fe;
            } else {
                simplex[dim] = reflected;
                values[dim] = fr;
            }
        } else if fr < values[dim - 1] {
            simplex[dim] = reflected;
            values[dim] = fr;
        } else {
            let (contracted, fc) = if fr < values[dim] {
                let c = along(0.5);
                let fc = f(&c);
                (c, fc)
            } else {
                let c = along(-0.5);
                let fc = f(&c);
                (c, fc)
            };
            if fc < values[dim].min(fr) {
                simplex[dim] = contracted;
                values[dim] = fc;
            } else {
                let best = simplex[0].clone();
                for i in 1..=dim {
                    simplex[i] = best
                        .iter()
                        .zip(&simplex[i])
                        .map(|(b, v)| b + 0.5 * (v - b))
                        .collect();
                    values[i] = f(&simplex[i]);
                }
            }
        }
    }
    let best = (0..=dim)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .unwrap_or(0);
    (simplex[best].clone(), values[best])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn forecast_recursions() {
        let ann = EtsFit::from_states(EtsFamily::Ann, 5.0, 0.0, None);
        assert_eq!(ann.forecast(3).unwrap(), vec![5.0, 5.0, 5.0]);
        let aan = EtsFit::from_states(EtsFamily::Aan, 10.0, 2.0, None);
        assert_eq!(aan.forecast(3).unwrap(), vec![12.0, 14.0, 16.0]);
        let damped = EtsFit::from_states(EtsFamily::AAdN, 10.0, 2.0, Some(0.9));
        assert!(close(&damped.forecast(3).unwrap(), &[11.8, 13.42, 14.878], 1e-12));
        assert!(ann.forecast(0).is_err());
    }

    #[test]
    fn constant_series_is_flat() {
        let fit = fit_ets(&[3.0; 6]).unwrap();
        assert!(close(&fit.forecast(5).unwrap(), &[3.0; 5], 1e-9));
    }

    #[test]
    fn linear_series_extrapolated() {
        let y: Vec<f64> = (1..=20).map(f64::from).collect();
        let fit = fit_ets(&y).unwrap();
        assert!(matches!(fit.family, EtsFamily::Aan | EtsFamily::AAdN));
        let f = fit.forecast(5).unwrap();
        if fit.family == EtsFamily::Aan {
            for (h, v) in f.iter().enumerate() {
                assert!((v - (21.0 + h as f64)).abs() < 1e-3, "{f:?}");
            }
        }
    }

    #[test]
    fn short_series_falls_back() {
        let fit = fit_ets(&[1.0, 2.0, 4.0]).unwrap();
        assert!(fit.fallback);
        assert_eq!(fit.family, EtsFamily::Ann);
        assert_eq!(fit.alpha, 0.5);
        assert!(fit_ets(&[1.0, f64::NAN, 2.0, 3.0, 4.0]).is_err());
    }

    #[test]
    fn residuals_match_replay() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y: Vec<f64> = (0..25)
            .map(|t| 0.3 * t as f64 + { let z: f64 = StandardNormal.sample(&mut rng); z })
            .collect();
        let fit = fit_ets(&y).unwrap();
        let fitted = fit.one_step_fitted(&y);
        for t in 0..y.len() {
            assert!((y[t] - fitted[t] - fit.residuals[t]).abs() < 1e-12);
        }
        let sse: f64 = fit.residuals.iter().map(|e| e * e).sum();
        assert!((sse / y.len() as f64 - fit.sigma2).abs() < 1e-12);
    }

    #[test]
    fn selected_has_minimal_aicc() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let y: Vec<f64> = (0..30)
                .map(|t| 0.1 * t as f64 + { let z: f64 = StandardNormal.sample(&mut rng); z })
                .collect();
            let best = fit_ets(&y).unwrap();
            for c in fit_candidates(&y).unwrap() {
                assert!(best.aicc <= c.aicc);
            }
            let a = best.alpha;
            assert!(a > 0.0 && a < 1.0);
            if let Some(b) = best.beta {
                assert!(b > 0.0 && b < a);
            }
            if let Some(p) = best.phi {
                assert!((0.8..=0.98).contains(&p));
            }
        }
    }

    #[test]
    fn shift_and_scale_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let y: Vec<f64> = (0..24)
                .map(|t| (t as f64 * 0.4).sin() + 0.5 * { let z: f64 = StandardNormal.sample(&mut rng); z })
                .collect();
            let base = fit_ets(&y).unwrap().forecast(6).unwrap();
            let shifted: Vec<f64> = y.iter().map(|v| v + 7.5).collect();
            let fs = fit_ets(&shifted).unwrap().forecast(6).unwrap();
            let scaled: Vec<f64> = y.iter().map(|v| v * 3.0).collect();
            let fc = fit_ets(&scaled).unwrap().forecast(6).unwrap();
            for h in 0..6 {
                assert!((fs[h] - (base[h] + 7.5)).abs() < 1e-6, "shift h={h}");
                assert!((fc[h] - 3.0 * base[h]).abs() < 1e-6, "scale h={h}");
            }
        }
    }

    #[test]
    fn fixed_forecaster_is_linear() {
        let fx = FixedEts {
            family: EtsFamily::Aan,
            alpha: 0.4,
            beta: 0.1,
            phi: 1.0,
        };
        let a = [1.0, 2.5, 2.0, 4.0, 5.5, 5.0];
        let b = [0.0, -1.0, 1.0, 0.5, 0.0, 2.0];
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 2.0 * x - 3.0 * y).collect();
        let (fa, _) = fx.forecast(&a, 4).unwrap();
        let (fb, _) = fx.forecast(&b, 4).unwrap();
        let (fab, _) = fx.forecast(&ab, 4).unwrap();
        for h in 0..4 {
            assert!((fab[h] - (2.0 * fa[h] - 3.0 * fb[h])).abs() < 1e-10);
        }
    }

    #[test]
    fn nelder_mead_quadratic() {
        let f = |x: &[f64]| (x[0] - 1.0).powi(2) + 10.0 * (x[1] + 2.0).powi(2);
        let (x, v) = nelder_mead(&f, &[0.0, 0.0], 0.5, 1e-14, 5000);
        assert!(v < 1e-10);
        assert!((x[0] - 1.0).abs() < 1e-4 && (x[1] + 2.0).abs() < 1e-4);
    }
}
