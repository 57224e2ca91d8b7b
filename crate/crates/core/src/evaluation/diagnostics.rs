use nalgebra::DMatrix;

use super::metrics::{jeffrey_term, to_probabilities};
use crate::error::{Error, Result};
use crate::panel::{DeathDensityPanel, Sex};

/// Symmetric KLD of each group against the national series.
#[derive(Debug, Clone, PartialEq)]
pub struct KlMatrices {
    pub sex: Sex,
    pub groups: Vec<String>,
    /// `groups × years`, averaged over ages.
    pub by_year: DMatrix<f64>,
    /// `groups × ages`, averaged over years.
    pub by_age: DMatrix<f64>,
}

pub fn diagnostics_klmatrix(panel: &DeathDensityPanel, sex: Sex) -> Result<KlMatrices> {
    let national = panel
        .national()
        .ok_or_else(|| Error::Invalid("panel has no national series".into()))?;
    let nat = panel
        .series(national, sex)
        .ok_or_else(|| Error::IncompletePanel(format!("missing ({national}, {sex})")))?;
    let q = to_probabilities(nat.values());
    let groups = panel.subnational_groups();
    let (n, a) = q.shape();
    let mut by_year = DMatrix::zeros(groups.len(), n);
    let mut by_age = DMatrix::zeros(groups.len(), a);
    for (i, g) in groups.iter().enumerate() {
        let s = panel
            .series(g, sex)
            .ok_or_else(|| Error::IncompletePanel(format!("missing ({g}, {sex})")))?;
        let p = to_probabilities(s.values());
        for t in 0..n {
            for u in 0..a {
                let j = jeffrey_term(p[(t, u)], q[(t, u)]);
                by_year[(i, t)] += j;
                by_age[(i, u)] += j;
            }
        }
    }
    by_year /= a as f64;
    by_age /= n as f64;
    Ok(KlMatrices {
        sex,
        groups,
        by_year,
        by_age,
    })
}

/// Lag-`h` cross-covariance surface `C_h(u, v) = n⁻¹ Σ_t (x_t(u) - x̄(u))(y_{t+h}(v) - ȳ(v))`.
fn cross_cov(xc: &DMatrix<f64>, yc: &DMatrix<f64>, h: usize) -> DMatrix<f64> {
    let n = xc.nrows();
    let a = xc.rows(0, n - h);
    let b = yc.rows(h, n - h);
    a.transpose() * b / n as f64
}

fn centre(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = x.row_mean();
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    c
}

/// Functional cross-correlation `‖C_h‖ / sqrt(∫C^x_0(u,u) ∫C^y_0(u,u))` for
/// lags `0..=max_lag`, with the Hilbert-Schmidt norm realised as a double sum.
pub fn functional_ccf(x: &DMatrix<f64>, y: &DMatrix<f64>, max_lag: usize) -> Result<Vec<f64>> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let n = x.nrows();
    if n <= max_lag + 2 {
        return Err(Error::Invalid(format!("{n} observations cannot support lag {max_lag}")));
    }
    let (xc, yc) = (centre(x), centre(y));
    let vx = xc.norm_squared() / n as f64;
    let vy = yc.norm_squared() / n as f64;
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Invalid("series has zero variance".into()));
    }
    let denom = (vx * vy).sqrt();
    Ok((0..=max_lag).map(|h| cross_cov(&xc, &yc, h).norm() / denom).collect())
}

/// Functional autocorrelation; identical to [`functional_ccf`] of a series with itself.
pub fn functional_acf(x: &DMatrix<f64>, max_lag: usize) -> Result<Vec<f64>> {
    functional_ccf(x, x, max_lag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{AgeGrid, DeathDensitySeries};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    use std::collections::BTreeMap;

    fn panel_with(values: Vec<(&str, DMatrix<f64>)>) -> DeathDensityPanel {
        let grid = AgeGrid::new(0, values[0].1.ncols()).unwrap();
        let mut series = BTreeMap::new();
        for (g, v) in &values {
            let s = DeathDensitySeries::new(grid, 2000, v.clone(), 100.0).unwrap();
            series.insert((g.to_string(), Sex::Female), s);
        }
        DeathDensityPanel::new(
            values.iter().map(|(g, _)| g.to_string()).collect(),
            Some("00".into()),
            series,
        )
        .unwrap()
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, a: usize) -> DMatrix<f64> {
        let mut m = DMatrix::from_fn(n, a, |_, _| rng.random_range(1.0..10.0));
        for mut r in m.row_iter_mut() {
            let s: f64 = r.sum();
            r *= 100.0 / s;
        }
        m
    }

    #[test]
    fn group_equal_to_national() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_rows(&mut rng, 4, 5);
        let k = diagnostics_klmatrix(&panel_with(vec![("00", v.clone()), ("01", v)]), Sex::Female).unwrap();
        assert_eq!(k.groups, vec!["01"]);
        assert!(k.by_year.iter().all(|x| *x == 0.0));
        assert!(k.by_age.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn perturbed_year_is_largest() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = random_rows(&mut rng, 6, 5);
        let mut w = v.clone();
        w[(3, 0)] += 30.0;
        w[(3, 4)] -= 30.0_f64.min(w[(3, 4)] - 0.1);
        let s: f64 = w.row(3).sum();
        let mut r = w.row_mut(3);
        r *= 100.0 / s;
        let k = diagnostics_klmatrix(&panel_with(vec![("00", v), ("01", w)]), Sex::Female).unwrap();
        let row = k.by_year.row(0);
        let max = row.iter().cloned().fold(0.0, f64::max);
        assert_eq!(row[3], max);
        assert!(row.iter().enumerate().all(|(i, x)| i == 3 || *x < max));
    }

    #[test]
    fn matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nat = random_rows(&mut rng, 3, 4);
        let g1 = random_rows(&mut rng, 3, 4);
        let g2 = random_rows(&mut rng, 3, 4);
        let k = diagnostics_klmatrix(
            &panel_with(vec![("00", nat.clone()), ("01", g1.clone()), ("02", g2.clone())]),
            Sex::Female,
        )
        .unwrap();
        for (i, g) in [g1, g2].iter().enumerate() {
            for t in 0..3 {
                let mut s = 0.0;
                for u in 0..4 {
                    let (p, q) = (g[(t, u)] / 100.0, nat[(t, u)] / 100.0);
                    s += (p - q) * (p / q).ln();
                }
                assert!((k.by_year[(i, t)] - s / 4.0).abs() < 1e-14);
            }
            for u in 0..4 {
                let mut s = 0.0;
                for t in 0..3 {
                    let (p, q) = (g[(t, u)] / 100.0, nat[(t, u)] / 100.0);
                    s += (p - q) * (p / q).ln();
                }
                assert!((k.by_age[(i, u)] - s / 3.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn missing_national() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random_rows(&mut rng, 3, 4);
        let grid = AgeGrid::new(0, 4).unwrap();
        let mut series = BTreeMap::new();
        series.insert(("01".to_string(), Sex::Female), DeathDensitySeries::new(grid, 2000, v, 100.0).unwrap());
        let p = DeathDensityPanel::new(vec!["01".into()], None, series).unwrap();
        assert!(diagnostics_klmatrix(&p, Sex::Female).is_err());
    }

    #[test]
    fn acf_is_self_ccf_and_unit_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DMatrix::from_fn(20, 6, |_, _| rng.random_range(-1.0..1.0));
        let a = functional_acf(&x, 3).unwrap();
        assert_eq!(a, functional_ccf(&x, &x, 3).unwrap());
        // ‖C_0‖_HS ≤ trace C_0 with equality only for rank one
        assert!(a[0] <= 1.0 + 1e-12);
    }

    #[test]
    fn rank_one_lag_zero_is_one() {
        let x = DMatrix::from_fn(10, 4, |t, u| (t as f64).sin() * (u as f64 + 1.0));
        let a = functional_acf(&x, 1).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn white_noise_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 200;
        let mut ok = 0;
        for _ in 0..100 {
            let x = DMatrix::from_fn(n, 1, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            });
            let a = functional_acf(&x, 1).unwrap();
            if a[1] < 3.0 / (n as f64).sqrt() {
                ok += 1;
            }
        }
        assert!(ok >= 95, "{ok}");
    }

    #[test]
    fn ar1_scores_decay() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 400;
        let mut s = vec![0.0; n];
        for t in 1..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            s[t] = 0.8 * s[t - 1] + z;
        }
        let phi = [0.3, 0.5, 0.2, -0.4, 0.6];
        let x = DMatrix::from_fn(n, 5, |t, u| s[t] * phi[u]);
        let a = functional_acf(&x, 3).unwrap();
        assert!(a[1] > a[2] && a[2] > a[3], "{a:?}");
    }

    #[test]
    fn degenerate_series() {
        let x = DMatrix::from_element(10, 3, 2.0);
        assert!(functional_acf(&x, 2).is_err());
        assert!(functional_acf(&DMatrix::zeros(4, 3), 2).is_err());
    }
}
