//! Configuration-driven batch runs.
//!
//! A run loads (or generates) a panel, splits its years, backtests every
//! requested model, calibrates intervals on the validation window, scores
//! everything on the test window and writes one self-describing directory.
//! Outputs depend only on the config and the data, never on the number of
//! worker threads.

mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::cdf::{LogitCdfSeries, DEFAULT_CLIP_EPSILON};
use crate::error::{Error, Result};
use crate::ets::{self, AutoEts, ScoreForecaster};
use crate::evaluation::{
    actual_densities, best_method_counts, diagnostics_klmatrix, ecp_cpd, functional_acf, functional_ccf,
    interval_score, jsd_root, kld_sym, run_expanding_window, summary_csv, BacktestPlan, BacktestResult,
    MetricTable, PROBABILITY_FLOOR,
};
use crate::fpca::RELATIVE_EIGEN_TOLERANCE;
use crate::intervals::{calibrate, collect_residuals, interval_from_point, Calibration, IntervalMethod, XI_GRID_STEP, XI_GRID_STEPS};
use crate::models::{LogitPanel, ModelKind, ModelSpec};
use crate::panel::{load_panel, split_years, DeathDensityPanel, SampleSplit, Sex, YearRange};
use crate::synth::synthetic_panel;

pub use config::{BacktestConfig, DataConfig, DiagnosticsConfig, HdfpcaConfig, RunConfig, RunSettings};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUBDIRS: [&str; 4] = ["forecasts", "intervals", "metrics", "diagnostics"];

/// The three backtests of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RunPlans {
    /// Test-window point forecasts.
    pub point: BacktestPlan,
    /// Validation-window forecasts used to build residual banks.
    pub validation: BacktestPlan,
    /// Interval scoring reuses the point backtest, keeping targets up to this year.
    pub interval_last_target: i32,
    pub interval_horizon: usize,
}

pub fn plans(split: &SampleSplit, backtest: &BacktestConfig) -> Result<RunPlans> {
    let point = BacktestPlan {
        initial_end: split.validation.last(),
        final_year: split.test.last(),
        max_horizon: backtest.point_horizon.min(split.test.len),
    };
    let validation = BacktestPlan {
        initial_end: split.train.last(),
        final_year: split.validation.last(),
        max_horizon: backtest.interval_horizon.min(split.validation.len),
    };
    let interval_horizon = backtest
        .interval_horizon
        .min(split.validation.len)
        .min(split.test.len.saturating_sub(1));
    if interval_horizon == 0 {
        return Err(Error::Split("test window too short for interval scoring".into()));
    }
    Ok(RunPlans {
        point,
        validation,
        interval_last_target: split.test.last() - 1,
        interval_horizon,
    })
}

/// Loads or generates the panel described by `data`.
pub fn load_data(data: &DataConfig, seed: u64) -> Result<DeathDensityPanel> {
    match (&data.path, &data.synthetic) {
        (Some(path), None) => {
            let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
            load_panel(file, &data.load)
        }
        (None, Some(synth)) => {
            let mut s = synth.clone();
            s.seed = seed;
            synthetic_panel(&s)
        }
        _ => Err(Error::Config("set exactly one of data.path and data.synthetic".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationRecord {
    pub model: ModelKind,
    pub group: String,
    pub sex: Sex,
    pub method: IntervalMethod,
    pub alpha: f64,
    pub horizon: usize,
    pub bank_size: usize,
    pub xi: Option<f64>,
    pub mean_half_width: f64,
    pub degenerate: bool,
}

/// Interval metrics for one (method, alpha).
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalTables {
    pub method: IntervalMethod,
    pub alpha: f64,
    pub ecp: MetricTable,
    pub cpd: MetricTable,
    pub score: MetricTable,
}

/// Everything a run computes, before anything is written.
#[derive(Debug, Clone)]
pub struct RunResults {
    pub split: SampleSplit,
    pub plans: RunPlans,
    pub kld: MetricTable,
    pub jsd: MetricTable,
    pub intervals: Vec<IntervalTables>,
    pub calibrations: Vec<CalibrationRecord>,
    /// Keyed by model, group, sex, index into `intervals`, horizon.
    pub calibration_store: BTreeMap<(ModelKind, String, Sex, usize, usize), Calibration>,
    pub backtests: Vec<(BacktestResult, BacktestResult)>,
    pub notes: Vec<String>,
}

fn alpha_label(alpha: f64) -> String {
    format!("a{alpha}")
}

/// Backtests, calibrates and scores every model in `settings`.
pub fn evaluate(
    panel: &DeathDensityPanel,
    split: SampleSplit,
    plans: RunPlans,
    settings: &RunSettings,
    forecaster: &dyn ScoreForecaster,
) -> Result<RunResults> {
    let logit = LogitPanel::from_panel(panel)?;
    let actual = actual_densities(panel);
    let years = panel.years();
    let mut kld = MetricTable::new("KLD", plans.point.max_horizon);
    let mut jsd = MetricTable::new("JSD", plans.point.max_horizon);
    let mut intervals: Vec<IntervalTables> = settings
        .methods
        .iter()
        .flat_map(|&method| {
            settings.alphas.iter().map(move |&alpha| IntervalTables {
                method,
                alpha,
                ecp: MetricTable::new("ECP", plans.interval_horizon),
                cpd: MetricTable::new("CPD", plans.interval_horizon),
                score: MetricTable::new("SCORE", plans.interval_horizon),
            })
        })
        .collect();
    let mut calibrations = Vec::new();
    let mut calibration_store = BTreeMap::new();
    let mut notes = Vec::new();
    let mut backtests = Vec::new();

    for spec in &settings.models {
        log::info!("backtesting {}", spec.kind);
        let point = run_expanding_window(&logit, &plans.point, spec, forecaster)?;
        let validation = run_expanding_window(&logit, &plans.validation, spec, forecaster)?;
        for f in point.failures.iter().chain(&validation.failures) {
            notes.push(format!("{} origin {}: {}", spec.kind, f.origin, f.message));
        }

        for ((g, s), cube) in &point.cubes {
            let act = &actual[&(g.clone(), *s)];
            let mut kl = Vec::with_capacity(plans.point.max_horizon);
            let mut js = Vec::with_capacity(plans.point.max_horizon);
            for h in 1..=plans.point.max_horizon {
                let p = cube.pairs(h, act, years, plans.point.final_year);
                if p.years.is_empty() {
                    kl.push(f64::NAN);
                    js.push(f64::NAN);
                } else {
                    kl.push(kld_sym(&p.actual, &p.forecast)?);
                    js.push(jsd_root(&p.actual, &p.forecast)?);
                }
            }
            kld.insert(spec.kind, g, *s, kl);
            jsd.insert(spec.kind, g, *s, js);

            let vcube = &validation.cubes[&(g.clone(), *s)];
            let mut per_table: Vec<[Vec<f64>; 3]> = intervals
                .iter()
                .map(|_| std::array::from_fn(|_| Vec::with_capacity(plans.interval_horizon)))
                .collect();
            for h in 1..=plans.interval_horizon {
                let vp = vcube.pairs(h, act, years, plans.validation.final_year);
                let bank = collect_residuals(h, &vp.actual, &vp.forecast);
                let tp = cube.pairs(h, act, years, plans.interval_last_target);
                for (ti, table) in intervals.iter().enumerate() {
                    let cal = bank.as_ref().map_err(|e| e.to_string()).and_then(|b| {
                        calibrate(b, table.method, table.alpha).map_err(|e| e.to_string())
                    });
                    let cal = match cal {
                        Ok(c) => c,
                        Err(e) => {
                            notes.push(format!(
                                "{} {g} {s} h={h} {} {}: {e}",
                                spec.kind,
                                table.method,
                                alpha_label(table.alpha)
                            ));
                            for v in per_table[ti].iter_mut() {
                                v.push(f64::NAN);
                            }
                            continue;
                        }
                    };
                    calibrations.push(calibration_record(spec.kind, g, *s, vp.years.len(), &cal));
                    calibration_store.insert((spec.kind, g.clone(), *s, ti, h), cal.clone());
                    if tp.years.is_empty() {
                        for v in per_table[ti].iter_mut() {
                            v.push(f64::NAN);
                        }
                        continue;
                    }
                    let (lower, upper) = bounds(&tp.forecast, &cal)?;
                    let cov = ecp_cpd(&tp.actual, &lower, &upper, table.alpha)?;
                    let score = interval_score(&tp.actual, &lower, &upper, table.alpha)?;
                    per_table[ti][0].push(cov.ecp);
                    per_table[ti][1].push(cov.cpd);
                    per_table[ti][2].push(score);
                }
            }
            for (table, [e, c, sc]) in intervals.iter_mut().zip(per_table) {
                table.ecp.insert(spec.kind, g, *s, e);
                table.cpd.insert(spec.kind, g, *s, c);
                table.score.insert(spec.kind, g, *s, sc);
            }
        }
        backtests.push((point, validation));
    }
    Ok(RunResults {
        split,
        plans,
        kld,
        jsd,
        intervals,
        calibrations,
        calibration_store,
        backtests,
        notes,
    })
}

fn calibration_record(model: ModelKind, group: &str, sex: Sex, bank_size: usize, cal: &Calibration) -> CalibrationRecord {
    let width = cal.width();
    let (xi, degenerate) = match cal {
        Calibration::Sd(c) => (Some(c.xi), c.degenerate),
        Calibration::Conformal(_) => (None, width.iter().all(|w| *w == 0.0)),
    };
    CalibrationRecord {
        model,
        group: group.to_string(),
        sex,
        method: cal.method(),
        alpha: cal.alpha(),
        horizon: cal.horizon(),
        bank_size,
        xi,
        mean_half_width: width.iter().sum::<f64>() / width.len() as f64,
        degenerate,
    }
}

/// Lower and upper bound matrices for each forecast row.
fn bounds(forecast: &DMatrix<f64>, cal: &Calibration) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (m, a) = forecast.shape();
    let mut lower = DMatrix::zeros(m, a);
    let mut upper = DMatrix::zeros(m, a);
    for r in 0..m {
        let row: Vec<f64> = forecast.row(r).iter().copied().collect();
        let iv = interval_from_point(&row, cal)?;
        for u in 0..a {
            lower[(r, u)] = iv.lower[u];
            upper[(r, u)] = iv.upper[u];
        }
    }
    Ok((lower, upper))
}

fn fmt_num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.10e}")
    } else {
        "NA".into()
    }
}

fn age_header(panel: &DeathDensityPanel) -> String {
    panel.grid().ages().map(|a| a.to_string()).collect::<Vec<_>>().join(",")
}

fn push_row(out: &mut String, prefix: &str, values: impl IntoIterator<Item = f64>) {
    out.push_str(prefix);
    for v in values {
        out.push(',');
        out.push_str(&fmt_num(v));
    }
    out.push('\n');
}

/// In-memory output tree: relative path → contents.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OutputTree {
    pub files: BTreeMap<String, String>,
}

impl OutputTree {
    fn add(&mut self, path: impl Into<String>, content: String) {
        self.files.insert(path.into(), content);
    }

    pub fn digest(&self) -> BTreeMap<String, String> {
        self.files
            .iter()
            .map(|(p, c)| (p.clone(), hex(&Sha256::digest(c.as_bytes()))))
            .collect()
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Forecasts and intervals from the first test origin, one file per series.
fn render_forecasts(panel: &DeathDensityPanel, results: &RunResults, tree: &mut OutputTree) -> Result<()> {
    let header = age_header(panel);
    let origin = results.plans.point.initial_end;
    for (point, _) in &results.backtests {
        let kind = point.spec.kind;
        for ((g, s), cube) in &point.cubes {
            let mut out = format!("origin,year,horizon,{header}\n");
            for h in 1..=cube.max_horizon {
                if let Some(v) = cube.get(origin, h) {
                    push_row(&mut out, &format!("{origin},{},{h}", origin + h as i32), v.iter().copied());
                }
            }
            tree.add(format!("forecasts/{kind}/{g}_{}.csv", s.code()), out);

            for (ti, table) in results.intervals.iter().enumerate() {
                let mut out = format!("origin,year,horizon,bound,{header}\n");
                for h in 1..=results.plans.interval_horizon {
                    let Some(v) = cube.get(origin, h) else { continue };
                    let Some(cal) = results.calibration_store.get(&(kind, g.clone(), *s, ti, h)) else {
                        continue;
                    };
                    let iv = interval_from_point(v, cal)?;
                    let year = origin + h as i32;
                    push_row(&mut out, &format!("{origin},{year},{h},lower"), iv.lower.iter().copied());
                    push_row(&mut out, &format!("{origin},{year},{h},upper"), iv.upper.iter().copied());
                }
                tree.add(
                    format!(
                        "intervals/{kind}/{}_{}/{g}_{}.csv",
                        table.method.name().to_ascii_lowercase(),
                        alpha_label(table.alpha),
                        s.code()
                    ),
                    out,
                );
            }
        }
    }
    Ok(())
}

fn render_metrics(results: &RunResults, models: &[ModelKind], sexes: &[Sex], tree: &mut OutputTree) {
    tree.add("metrics/point_summary.csv", summary_csv(&[&results.kld, &results.jsd], models, sexes));
    tree.add("metrics/kld.csv", results.kld.to_long_csv());
    tree.add("metrics/jsd.csv", results.jsd.to_long_csv());
    for &s in sexes {
        for t in [&results.kld, &results.jsd] {
            let hm = best_method_counts(t, s, true);
            tree.add(format!("metrics/heatmap_{}_{}.csv", t.metric.to_lowercase(), s.code()), hm.to_csv());
        }
    }
    for it in &results.intervals {
        let stem = format!("{}_{}", it.method.name().to_ascii_lowercase(), alpha_label(it.alpha));
        tree.add(
            format!("metrics/interval_{stem}_summary.csv"),
            summary_csv(&[&it.ecp, &it.cpd, &it.score], models, sexes),
        );
        for t in [&it.ecp, &it.cpd, &it.score] {
            tree.add(format!("metrics/interval_{stem}_{}.csv", t.metric.to_lowercase()), t.to_long_csv());
        }
        for &s in sexes {
            for t in [&it.cpd, &it.score] {
                let hm = best_method_counts(t, s, true);
                tree.add(
                    format!("metrics/heatmap_{stem}_{}_{}.csv", t.metric.to_lowercase(), s.code()),
                    hm.to_csv(),
                );
            }
        }
    }
    let mut cal = String::from("model,group,sex,method,alpha,horizon,bank_size,xi,mean_half_width,degenerate\n");
    for c in &results.calibrations {
        let _ = writeln!(
            cal,
            "{},{},{},{},{},{},{},{},{},{}",
            c.model,
            c.group,
            c.sex.code(),
            c.method,
            c.alpha,
            c.horizon,
            c.bank_size,
            c.xi.map(|x| format!("{x:.2}")).unwrap_or_else(|| "NA".into()),
            fmt_num(c.mean_half_width),
            c.degenerate
        );
    }
    tree.add("metrics/calibration.csv", cal);
}

fn render_diagnostics(panel: &DeathDensityPanel, max_lag: usize, tree: &mut OutputTree, notes: &mut Vec<String>) -> Result<()> {
    let logit = LogitPanel::from_panel(panel)?;
    let n = panel.years().len;
    let lag = max_lag.min(n.saturating_sub(3));
    for s in panel.sexes() {
        if panel.national().is_some() {
            let k = diagnostics_klmatrix(panel, s)?;
            let years: Vec<String> = panel.years().years().map(|y| y.to_string()).collect();
            let mut by_year = format!("group,{}\n", years.join(","));
            let mut by_age = format!("group,{}\n", age_header(panel));
            for (i, g) in k.groups.iter().enumerate() {
                push_row(&mut by_year, g, k.by_year.row(i).iter().copied());
                push_row(&mut by_age, g, k.by_age.row(i).iter().copied());
            }
            tree.add(format!("diagnostics/kl_by_year_{}.csv", s.code()), by_year);
            tree.add(format!("diagnostics/kl_by_age_{}.csv", s.code()), by_age);
        }
        let national = panel
            .national()
            .and_then(|nat| panel.series(nat, s))
            .map(|d| LogitCdfSeries::from_series(d).map(|x| x.values))
            .transpose()?;
        let mut out = String::from("group,lag,acf,ccf\n");
        for g in &logit.groups {
            let Ok(x) = logit.get(g, s) else { continue };
            let acf = match functional_acf(x, lag) {
                Ok(a) => a,
                Err(e) => {
                    notes.push(format!("acf {g} {s}: {e}"));
                    continue;
                }
            };
            let ccf = national.as_ref().and_then(|y| functional_ccf(x, y, lag).ok());
            for h in 0..=lag {
                let c = ccf.as_ref().map(|c| c[h]).unwrap_or(f64::NAN);
                let _ = writeln!(out, "{g},{h},{},{}", fmt_num(acf[h]), fmt_num(c));
            }
        }
        tree.add(format!("diagnostics/fts_correlation_{}.csv", s.code()), out);
    }
    Ok(())
}

/// Every design decision in effect, recorded in the manifest.
pub fn decisions(config: &RunConfig, settings: &RunSettings) -> Value {
    json!({
        "panel": {
            "radix": config.data.synthetic.as_ref().map(|s| s.radix).unwrap_or(config.data.load.radix),
            "row_sum_tolerance": crate::panel::ROW_SUM_TOLERANCE,
            "rescale_warn_tolerance": crate::panel::RESCALE_WARN_TOLERANCE,
            "group_order": if config.data.load.group_order.is_some() { "declared" } else { "sorted by identifier" },
            "split_proportions": config.split,
            "split_rounding": "cumulative proportions rounded to whole years",
        },
        "transform": {
            "clip_epsilon": DEFAULT_CLIP_EPSILON,
            "dropped_column": "last (CDF identically 1)",
            "inverse_repair": "monotone rearrangement (row sort) before differencing",
        },
        "fpca": {
            "covariance_divisor": "n - 1",
            "inner_product_weights": "unit",
            "sign_convention": "eigenfunction sums nonnegative; first clearly nonzero entry positive when the sum vanishes",
            "relative_eigen_tolerance": RELATIVE_EIGEN_TOLERANCE,
            "selection": settings.selection.to_string(),
            "evr_threshold": "eta = 1 / ln(max(lambda_1, n))",
            "evr_k_max": "count of eigenvalues >= total variance / n",
        },
        "score_forecaster": {
            "families": ets::EtsFamily::ALL.iter().map(|f| f.to_string()).collect::<Vec<_>>(),
            "selection": "AICc",
            "alpha_bounds": ets::ALPHA_BOUNDS,
            "beta_over_alpha_bounds": ets::BETA_RATIO_BOUNDS,
            "phi_bounds": ets::PHI_BOUNDS,
            "initial_states": "profiled out by least squares",
            "optimizer": "Nelder-Mead in logistic coordinates",
            "optimizer_tolerance": ets::NM_TOLERANCE,
            "optimizer_max_iterations": ets::NM_MAX_ITER,
            "optimizer_restarts": ets::RESTARTS.len(),
            "short_series_fallback": { "min_observations": ets::MIN_OBSERVATIONS, "model": "ANN", "alpha": ets::FALLBACK_ALPHA },
        },
        "models": {
            "mlfts_specific_series": "centred curves minus the raw common series",
            "fanova_effects": "held fixed at their training means",
            "fanova_residual_model": "MFTS per group",
            "hdfpca_p0": config.hdfpca.p0,
            "hdfpca_factors": config.hdfpca.r,
            "hdfpca_factor_method": "eigendecomposition of the cross-series score covariance",
        },
        "intervals": {
            "xi_grid": { "start": 0.0, "step": XI_GRID_STEP, "end": XI_GRID_STEP * XI_GRID_STEPS as f64 },
            "xi_tie_break": "smaller xi",
            "xi_objective": "|coverage - (1 - alpha)| over all validation cells",
            "sd_divisor": "M - 1",
            "symmetric_xi": true,
            "conformal_quantile": "type 7 (linear interpolation)",
            "lower_bound_clamp": 0.0,
            "calibration_unit": "(model, group, sex, horizon)",
            "methods": settings.methods.iter().map(|m| m.name()).collect::<Vec<_>>(),
            "alphas": settings.alphas,
        },
        "evaluation": {
            "probability_floor": PROBABILITY_FLOOR,
            "kld": "Jeffrey divergence averaged over holdout pairs and ages",
            "jsd": "geometric-mean reference, averaged then square-rooted",
            "cpd": "|non-coverage - alpha|",
            "acf_norm": "Hilbert-Schmidt (square root of double sum)",
            "double_integrals": "unit-weight double sums",
            "backtest_fits": "one fit per origin reused across horizons",
            "heatmap_tie_order": ModelKind::ALL.iter().map(|m| m.name()).collect::<Vec<_>>(),
            "interval_test_targets": "up to the year before the last",
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub output: PathBuf,
    pub files: usize,
    /// SHA-256 of the manifest bytes.
    pub manifest_sha256: String,
    pub notes: usize,
}

fn data_source(config: &RunConfig) -> Result<Value> {
    Ok(match (&config.data.path, &config.data.synthetic) {
        (Some(p), _) => {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            json!({
                "kind": "file",
                "file_name": p.file_name().map(|f| f.to_string_lossy().into_owned()),
                "sha256": hex(&Sha256::digest(&bytes)),
                "load": config.data.load,
            })
        }
        (None, Some(s)) => json!({ "kind": "synthetic", "synthetic": s, "seed": config.seed }),
        _ => Value::Null,
    })
}

fn year_range(y: YearRange) -> Value {
    json!({ "first": y.first, "last": y.last() })
}

/// Computes the full output tree and manifest without touching the disk.
pub fn build_outputs(config: &RunConfig) -> Result<OutputTree> {
    build_outputs_with(config, &AutoEts)
}

pub fn build_outputs_with(config: &RunConfig, forecaster: &dyn ScoreForecaster) -> Result<OutputTree> {
    let settings = config.settings()?;
    let panel = load_data(&config.data, config.seed)?;
    panel.require_complete()?;
    let split = split_years(panel.years(), config.split)?;
    let plans = plans(&split, &config.backtest)?;
    let mut results = evaluate(&panel, split, plans, &settings, forecaster)?;

    let mut tree = OutputTree::default();
    let models: Vec<ModelKind> = settings.models.iter().map(|m| m.kind).collect();
    let sexes = panel.sexes();
    render_forecasts(&panel, &results, &mut tree)?;
    render_metrics(&results, &models, &sexes, &mut tree);
    let mut notes = std::mem::take(&mut results.notes);
    render_diagnostics(&panel, config.diagnostics.max_lag, &mut tree, &mut notes)?;

    let fits: Vec<Value> = results
        .backtests
        .iter()
        .flat_map(|(p, v)| [("point", p), ("validation", v)])
        .flat_map(|(name, bt)| {
            bt.reports.iter().map(move |(origin, reps)| {
                json!({ "model": bt.spec.kind, "backtest": name, "origin": origin, "fits": reps })
            })
        })
        .collect();
    let model_specs: Vec<&ModelSpec> = settings.models.iter().collect();
    let manifest = json!({
        "tool": "cdfcast",
        "version": env!("CARGO_PKG_VERSION"),
        "seed": config.seed,
        "data": data_source(config)?,
        "panel": {
            "groups": panel.subnational_groups(),
            "national": panel.national(),
            "sexes": sexes,
            "years": year_range(panel.years()),
            "ages": { "first": panel.grid().first(), "last": panel.grid().last() },
        },
        "split": {
            "train": year_range(split.train),
            "validation": year_range(split.validation),
            "test": year_range(split.test),
        },
        "plans": plans,
        "models": model_specs,
        "decisions": decisions(config, &settings),
        "fits": fits,
        "notes": notes,
        "files": tree.digest(),
    });
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    tree.add(MANIFEST_FILE, text);
    Ok(tree)
}

fn partial_dir(output: &Path) -> PathBuf {
    let name = output
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    output.with_file_name(format!(".{name}.partial"))
}

/// Writes `tree` into `output`, replacing a previous run directory. Refuses
/// to replace a non-empty directory that is not a run directory.
pub fn write_outputs(tree: &OutputTree, output: &Path) -> Result<()> {
    if output.exists() {
        let is_run = output.join(MANIFEST_FILE).is_file();
        let empty = fs::read_dir(output).map_err(|e| Error::io(output, e))?.next().is_none();
        if !is_run && !empty {
            return Err(Error::Config(format!(
                "{} exists and is not a previous run directory",
                output.display()
            )));
        }
    }
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = partial_dir(output);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    let write_all = || -> Result<()> {
        for d in SUBDIRS {
            fs::create_dir_all(tmp.join(d)).map_err(|e| Error::io(tmp.join(d), e))?;
        }
        for (rel, content) in &tree.files {
            let path = tmp.join(rel);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
        }
        if output.exists() {
            fs::remove_dir_all(output).map_err(|e| Error::io(output, e))?;
        }
        fs::rename(&tmp, output).map_err(|e| Error::io(output, e))
    };
    let res = write_all();
    if res.is_err() && tmp.exists() {
        let _ = fs::remove_dir_all(&tmp);
    }
    res
}

/// Runs `config` end to end. Nothing is written unless every stage succeeds.
pub fn run(config: &RunConfig) -> Result<RunSummary> {
    let tree = build_outputs(config)?;
    write_outputs(&tree, &config.output)?;
    let manifest = &tree.files[MANIFEST_FILE];
    let notes = serde_json::from_str::<Value>(manifest)?["notes"]
        .as_array()
        .map_or(0, |a| a.len());
    Ok(RunSummary {
        output: config.output.clone(),
        files: tree.files.len(),
        manifest_sha256: hex(&Sha256::digest(manifest.as_bytes())),
        notes,
    })
}
