use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::mean_median;
use crate::models::ModelKind;
use crate::panel::Sex;

/// One metric for every (model, group, sex), indexed by horizon `1..=H`.
/// Missing horizons hold NaN.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricTable {
    pub metric: String,
    pub horizons: usize,
    pub values: BTreeMap<(ModelKind, String, Sex), Vec<f64>>,
}

impl MetricTable {
    pub fn new(metric: impl Into<String>, horizons: usize) -> Self {
        Self {
            metric: metric.into(),
            horizons,
            values: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, model: ModelKind, group: &str, sex: Sex, per_horizon: Vec<f64>) {
        assert_eq!(per_horizon.len(), self.horizons, "one value per horizon");
        self.values.insert((model, group.to_string(), sex), per_horizon);
    }

    pub fn get(&self, model: ModelKind, group: &str, sex: Sex) -> Option<&[f64]> {
        self.values.get(&(model, group.to_string(), sex)).map(|v| v.as_slice())
    }

    pub fn models(&self) -> Vec<ModelKind> {
        let mut m: Vec<ModelKind> = self.values.keys().map(|k| k.0).collect();
        m.dedup();
        m
    }

    pub fn groups(&self) -> Vec<String> {
        let mut g: Vec<String> = self.values.keys().map(|k| k.1.clone()).collect();
        g.sort();
        g.dedup();
        g
    }

    /// Group-averaged value per horizon for `(model, sex)`.
    pub fn group_average(&self, model: ModelKind, sex: Sex) -> Vec<f64> {
        let rows: Vec<&Vec<f64>> = self
            .values
            .iter()
            .filter(|((m, _, s), _)| *m == model && *s == sex)
            .map(|(_, v)| v)
            .collect();
        (0..self.horizons)
            .map(|h| {
                let vals: Vec<f64> = rows.iter().map(|r| r[h]).filter(|v| v.is_finite()).collect();
                if vals.is_empty() {
                    f64::NAN
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                }
            })
            .collect()
    }

    /// Long format: `model,group,sex,horizon,value`.
    pub fn to_long_csv(&self) -> String {
        let mut out = format!("model,group,sex,horizon,{}\n", self.metric);
        for ((m, g, s), v) in &self.values {
            for (h, x) in v.iter().enumerate() {
                let _ = writeln!(out, "{m},{g},{},{},{}", s.code(), h + 1, fmt_value(*x));
            }
        }
        out
    }
}

pub(crate) fn fmt_value(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.10e}")
    } else {
        "NA".to_string()
    }
}

/// Horizon rows plus `mean` and `median` rows, one column per (model, sex),
/// averaged over groups.
pub fn summary_csv(tables: &[&MetricTable], models: &[ModelKind], sexes: &[Sex]) -> String {
    let mut out = String::from("metric,sex,horizon");
    for m in models {
        let _ = write!(out, ",{m}");
    }
    out.push('\n');
    for t in tables {
        for &s in sexes {
            let cols: Vec<Vec<f64>> = models.iter().map(|&m| t.group_average(m, s)).collect();
            for h in 0..t.horizons {
                let _ = write!(out, "{},{},{}", t.metric, s.code(), h + 1);
                for c in &cols {
                    let _ = write!(out, ",{}", fmt_value(c[h]));
                }
                out.push('\n');
            }
            for (label, pick) in [("mean", 0), ("median", 1)] {
                let _ = write!(out, "{},{},{label}", t.metric, s.code());
                for c in &cols {
                    let mm = mean_median(c);
                    let _ = write!(out, ",{}", fmt_value(if pick == 0 { mm.0 } else { mm.1 }));
                }
                out.push('\n');
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn averages_and_summary() {
        let mut t = MetricTable::new("KLD", 2);
        t.insert(ModelKind::Ufts, "01", Sex::Female, vec![1.0, 3.0]);
        t.insert(ModelKind::Ufts, "02", Sex::Female, vec![3.0, f64::NAN]);
        assert_eq!(t.group_average(ModelKind::Ufts, Sex::Female), vec![2.0, 3.0]);
        let csv = summary_csv(&[&t], &[ModelKind::Ufts], &[Sex::Female]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "metric,sex,horizon,UFTS");
        assert_eq!(lines.len(), 5);
        assert!(lines[3].starts_with("KLD,F,mean,2.5"));
        assert!(t.to_long_csv().contains("UFTS,02,F,2,NA"));
    }
}
