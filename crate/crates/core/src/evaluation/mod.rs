//! Backtesting and scoring.

mod backtest;
mod diagnostics;
mod heatmap;
mod metrics;
mod table;

pub use backtest::{
    actual_densities, run_expanding_window, BacktestFailure, BacktestPlan, BacktestResult, ForecastCube, HorizonPairs,
};
pub use diagnostics::{diagnostics_klmatrix, functional_acf, functional_ccf, KlMatrices};
pub use heatmap::{best_method_counts, HeatmapCounts};
pub use metrics::{
    ecp_cpd, interval_score, interval_score_cell, jeffrey_term, jsd_root, kld_sym, mean_median, to_probabilities,
    Coverage, PROBABILITY_FLOOR,
};
pub use table::{summary_csv, MetricTable};
