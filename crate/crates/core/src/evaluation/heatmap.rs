use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::table::MetricTable;
use crate::models::ModelKind;
use crate::panel::Sex;

/// How often each model attains the smallest error, per horizon.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeatmapCounts {
    pub metric: String,
    pub sex: Sex,
    /// Column order; also the tie-break order.
    pub models: Vec<ModelKind>,
    /// `counts[h - 1][j]` for model `models[j]`.
    pub counts: Vec<Vec<usize>>,
}

impl HeatmapCounts {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon");
        for m in &self.models {
            let _ = write!(out, ",{m}");
        }
        out.push('\n');
        for (h, row) in self.counts.iter().enumerate() {
            let _ = write!(out, "{}", h + 1);
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}

/// Counts, per horizon, the groups where each model is best. `lower_is_better`
/// is false for metrics like coverage where the target is maximal. Ties go to
/// the model listed first in [`ModelKind::ALL`]. Groups with a missing value
/// for any model at a horizon are skipped for that horizon.
pub fn best_method_counts(table: &MetricTable, sex: Sex, lower_is_better: bool) -> HeatmapCounts {
    let models: Vec<ModelKind> = ModelKind::ALL
        .into_iter()
        .filter(|m| table.models().contains(m))
        .collect();
    let groups = table.groups();
    let mut counts = vec![vec![0usize; models.len()]; table.horizons];
    for h in 0..table.horizons {
        for g in &groups {
            let vals: Option<Vec<f64>> = models
                .iter()
                .map(|&m| table.get(m, g, sex).map(|v| v[h]).filter(|x| x.is_finite()))
                .collect();
            let Some(vals) = vals else { continue };
            let mut best = 0;
            for j in 1..vals.len() {
                let better = if lower_is_better {
                    vals[j] < vals[best]
                } else {
                    vals[j] > vals[best]
                };
                if better {
                    best = j;
                }
            }
            counts[h][best] += 1;
        }
    }
    HeatmapCounts {
        metric: table.metric.clone(),
        sex,
        models,
        counts,
    }
}
