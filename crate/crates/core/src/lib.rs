//! Forecasting engine for panels of age-at-death distributions.
//!
//! Life-table death counts are mapped to an unconstrained functional time
//! series through a cumulative-distribution plus logit transform, modelled
//! with one of five functional principal component strategies, and mapped
//! back to densities. Prediction intervals are calibrated on a validation
//! window and everything is scored under an expanding-window backtest.
//!
//! The crate is organised bottom-up:
//!
//! * [`panel`]: ingestion and validation of death-count panels.
//! * [`cdf`]: the density ↔ logit-CDF transform and its inverse.
//! * [`fpca`]: Karhunen-Loève decomposition and component selection.
//! * [`ets`]: exponential-smoothing forecasts of component scores.
//! * [`models`]: UFTS, MFTS, MLFTS, FANOVA and HDFPCA forecasters.
//! * [`intervals`]: standard-deviation and split-conformal intervals.
//! * [`evaluation`]: backtests, divergence and interval metrics, diagnostics.
//! * [`pipeline`]: configuration-driven batch runs with deterministic output.

#![allow(clippy::needless_range_loop)]

pub mod cdf;
pub mod error;
pub mod ets;
pub mod evaluation;
pub mod fpca;
pub mod intervals;
pub mod models;
pub mod panel;
pub mod pipeline;
pub mod synth;

pub use cdf::{CdfSeries, LogitCdfSeries, DEFAULT_CLIP_EPSILON};
pub use error::{Error, Result};
pub use ets::{AutoEts, EtsFamily, EtsFit, FixedEts, ScoreForecaster};
pub use fpca::{ComponentSelection, FpcaModel, SelectionMethod, SelectionPolicy};
pub use intervals::{ConformalCalibration, IntervalForecast, IntervalMethod, ResidualBank, SdCalibration};
pub use models::{DensityForecast, ModelKind, ModelSpec};
pub use panel::{AgeGrid, DeathDensityPanel, DeathDensitySeries, SampleSplit, Sex, DEFAULT_RADIX};
