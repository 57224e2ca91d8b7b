//! Seeded synthetic death-count panels for tests, demos and benchmarks.
//!
//! Each row is a mixture of an infant-mortality mass at age 0 and a
//! left-skewed (Gompertz-like) adult distribution whose mode drifts upward
//! over time, with group and sex offsets and AR(1) year-to-year noise.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{AgeGrid, DeathDensityPanel, DeathDensitySeries, Sex, DEFAULT_RADIX};

pub const NATIONAL_GROUP: &str = "00";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub groups: usize,
    pub first_year: i32,
    pub years: usize,
    pub ages: usize,
    pub radix: f64,
    /// Set from the run seed rather than the data table.
    #[serde(skip)]
    pub seed: u64,
    /// Adds a national series `00`, the average of the groups.
    pub national: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            groups: 2,
            first_year: 1975,
            years: 48,
            ages: 111,
            radix: DEFAULT_RADIX,
            seed: 1,
            national: true,
        }
    }
}

fn gumbel_min_cdf(x: f64, mode: f64, scale: f64) -> f64 {
    -(-((x - mode) / scale).exp()).exp_m1()
}

/// One density row of length `ages` summing to one.
pub fn density_row(ages: usize, mode: f64, scale: f64, infant: f64) -> Vec<f64> {
    let g0 = gumbel_min_cdf(0.0, mode, scale);
    let cdf = |x: f64| infant + (1.0 - infant) * (gumbel_min_cdf(x, mode, scale) - g0) / (1.0 - g0);
    let mut row = Vec::with_capacity(ages);
    let mut prev = 0.0;
    for u in 0..ages {
        let next = if u + 1 == ages { 1.0 } else { cdf((u + 1) as f64) };
        row.push((next - prev).max(0.0));
        prev = next;
    }
    let s: f64 = row.iter().sum();
    row.iter().map(|v| v / s).collect()
}

pub fn group_name(i: usize) -> String {
    format!("{:02}", i + 1)
}

pub fn synthetic_panel(cfg: &SynthConfig) -> Result<DeathDensityPanel> {
    if cfg.groups == 0 || cfg.years < 3 || cfg.ages < 3 {
        return Err(Error::Config(format!(
            "synthetic panel needs groups >= 1, years >= 3 and ages >= 3, got {} / {} / {}",
            cfg.groups, cfg.years, cfg.ages
        )));
    }
    let grid = AgeGrid::new(0, cfg.ages)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let offset = Normal::new(0.0, 1.5).expect("valid sd");
    let shock = Normal::new(0.0, 0.35).expect("valid sd");
    let mut series = BTreeMap::new();
    let mut national: BTreeMap<Sex, DMatrix<f64>> = BTreeMap::new();
    let names: Vec<String> = (0..cfg.groups).map(group_name).collect();

    for name in &names {
        let group_shift = offset.sample(&mut rng);
        let z: f64 = offset.sample(&mut rng);
        let group_infant = 1.0 + 0.2 * z.tanh();
        let mut common = 0.0;
        let mut own = [0.0; 2];
        let mut rows: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for t in 0..cfg.years {
            common = 0.7 * common + shock.sample(&mut rng);
            for (si, sex) in Sex::BOTH.iter().enumerate() {
                own[si] = 0.5 * own[si] + 0.5 * shock.sample(&mut rng);
                let female = matches!(sex, Sex::Female);
                let tf = t as f64;
                let mode = 76.0 + if female { 6.0 } else { 0.0 } + group_shift + 0.15 * tf + common + own[si];
                let scale = (if female { 9.0 } else { 10.5 }) - 0.03 * tf;
                let infant = 0.012 * (-0.05 * tf).exp() * group_infant * if female { 0.85 } else { 1.0 };
                rows[si].extend(density_row(cfg.ages, mode, scale, infant).into_iter().map(|v| v * cfg.radix));
            }
        }
        for (si, sex) in Sex::BOTH.iter().enumerate() {
            let values = DMatrix::from_row_slice(cfg.years, cfg.ages, &rows[si]);
            let acc = national
                .entry(*sex)
                .or_insert_with(|| DMatrix::zeros(cfg.years, cfg.ages));
            *acc += &values;
            series.insert(
                (name.clone(), *sex),
                DeathDensitySeries::new(grid, cfg.first_year, values, cfg.radix)?,
            );
        }
    }

    let mut groups = names;
    let mut national_name = None;
    if cfg.national {
        for (sex, total) in national {
            let values = total / cfg.groups as f64;
            series.insert(
                (NATIONAL_GROUP.to_string(), sex),
                DeathDensitySeries::new(grid, cfg.first_year, values, cfg.radix)?,
            );
        }
        groups.insert(0, NATIONAL_GROUP.to_string());
        national_name = Some(NATIONAL_GROUP.to_string());
    }
    DeathDensityPanel::new(groups, national_name, series)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_valid_densities() {
        let p = synthetic_panel(&SynthConfig::default()).unwrap();
        assert_eq!(p.groups(), &["00", "01", "02"]);
        assert_eq!(p.subnational_groups(), vec!["01", "02"]);
        for (_, s) in p.iter() {
            assert_eq!(s.values().shape(), (48, 111));
            for r in s.values().row_iter() {
                assert!((r.sum() - 1e5).abs() < 1e-6);
                assert!(r.iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn seeded() {
        let cfg = SynthConfig {
            groups: 3,
            years: 10,
            ..Default::default()
        };
        assert_eq!(synthetic_panel(&cfg).unwrap(), synthetic_panel(&cfg).unwrap());
        let other = SynthConfig { seed: 2, ..cfg.clone() };
        assert_ne!(synthetic_panel(&cfg).unwrap(), synthetic_panel(&other).unwrap());
    }

    #[test]
    fn mode_moves_up() {
        let p = synthetic_panel(&SynthConfig::default()).unwrap();
        let v = p.series("01", Sex::Female).unwrap().values();
        let argmax = |t: usize| {
            (20..111)
                .max_by(|&a, &b| v[(t, a)].total_cmp(&v[(t, b)]))
                .unwrap()
        };
        assert!(argmax(47) > argmax(0));
    }
}
