use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cdfcast_core::evaluation::run_expanding_window;
use cdfcast_core::fpca::fit_fpca;
use cdfcast_core::intervals::{calibrate, collect_residuals, interval_from_point};
use cdfcast_core::models::{forecast_panel, panel_densities, LogitPanel};
use cdfcast_core::panel::{split_years, LoadOptions};
use cdfcast_core::pipeline::{self, plans, BacktestConfig, DataConfig, RunConfig};
use cdfcast_core::synth::SynthConfig;
use cdfcast_core::{AutoEts, DeathDensityPanel, Error, IntervalMethod, LogitCdfSeries, ModelKind, ModelSpec, SelectionPolicy};

/// Forecast age-at-death distributions with functional time-series models.
#[derive(Debug, Parser)]
#[command(name = "cdfcast", version, about)]
struct Cli {
    /// Worker threads (defaults to one per core).
    #[arg(long, global = true, env = "CDFCAST_WORKERS")]
    workers: Option<usize>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write logit-CDF curves for every series.
    Transform {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        output: PathBuf,
    },
    /// Fit FPCA to every series and report the retained components.
    Fpca {
        #[command(flatten)]
        data: DataArgs,
        /// `evr` or a fixed number of components.
        #[arg(long, default_value = "evr")]
        k: SelectionPolicy,
        /// Write JSON here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Fit one model on all years and forecast death counts.
    Forecast {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 16)]
        horizon: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Calibrate on the validation window and emit interval forecasts from the last year.
    Interval {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "conformal")]
        method: IntervalMethod,
        #[arg(long, default_value_t = 0.2)]
        alpha: f64,
        #[arg(long, default_value_t = 15)]
        horizon: usize,
        /// Train, validation and test proportions.
        #[arg(long, value_delimiter = ',', default_values_t = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0])]
        split: Vec<f64>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Backtest and score models on a panel given by flags.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',', default_values_t = ModelKind::ALL.map(|m| m.name().to_string()))]
        models: Vec<String>,
        #[arg(long, default_value = "evr")]
        k: String,
        #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.05])]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = ["sd".to_string(), "conformal".to_string()])]
        methods: Vec<String>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run a TOML config end to end.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Overrides `seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `models`.
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<String>>,
    },
}

#[derive(Debug, Clone, Args)]
struct DataArgs {
    /// Long-format CSV/TSV with group, sex, year, age, deaths columns.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    input: Option<PathBuf>,
    /// Use a generated panel instead of an input file.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value_t = 2, requires = "synthetic")]
    groups: usize,
    #[arg(long, default_value_t = 48, requires = "synthetic")]
    years: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Group identifier of the national aggregate in the input.
    #[arg(long)]
    national: Option<String>,
}

impl DataArgs {
    fn config(&self) -> DataConfig {
        match &self.input {
            Some(p) => DataConfig {
                path: Some(p.clone()),
                synthetic: None,
                load: LoadOptions {
                    national: self.national.clone(),
                    ..LoadOptions::default()
                },
            },
            None => DataConfig {
                path: None,
                synthetic: Some(SynthConfig {
                    groups: self.groups,
                    years: self.years,
                    ..SynthConfig::default()
                }),
                load: LoadOptions::default(),
            },
        }
    }

    fn load(&self) -> Result<DeathDensityPanel> {
        Ok(pipeline::load_data(&self.config(), self.seed)?)
    }
}

#[derive(Debug, Clone, Args)]
struct ModelArgs {
    #[arg(long, default_value = "ufts")]
    model: ModelKind,
    /// `evr` or a fixed number of components.
    #[arg(long, default_value = "evr")]
    k: SelectionPolicy,
    /// HDFPCA first-stage components.
    #[arg(long, default_value_t = cdfcast_core::models::DEFAULT_P0)]
    p0: usize,
    /// HDFPCA factors.
    #[arg(long, default_value_t = cdfcast_core::models::DEFAULT_FACTORS)]
    r: usize,
}

impl ModelArgs {
    fn spec(&self) -> ModelSpec {
        ModelSpec {
            p0: self.p0,
            r: self.r,
            ..ModelSpec::new(self.model, self.k)
        }
    }
}

fn fmt(x: f64) -> String {
    format!("{x:.10e}")
}

fn csv_row(out: &mut String, prefix: &str, values: impl IntoIterator<Item = f64>) {
    out.push_str(prefix);
    for v in values {
        out.push(',');
        out.push_str(&fmt(v));
    }
    out.push('\n');
}

fn write(path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, content).with_context(|| format!("writing {}", path.display()))
}

fn transform(data: &DataArgs, output: &Path) -> Result<()> {
    let panel = data.load()?;
    let ages: Vec<String> = panel.grid().ages().take(panel.grid().len() - 1).map(|a| a.to_string()).collect();
    let mut n = 0;
    for ((g, s), series) in panel.iter() {
        let x = LogitCdfSeries::from_series(series)?;
        let mut out = format!("year,{}\n", ages.join(","));
        for (i, year) in panel.years().years().enumerate() {
            csv_row(&mut out, &year.to_string(), x.values.row(i).iter().copied());
        }
        write(&output.join(format!("{g}_{}.csv", s.code())), &out)?;
        n += 1;
    }
    println!("wrote {n} logit-CDF series to {}", output.display());
    Ok(())
}

fn fpca(data: &DataArgs, k: SelectionPolicy, output: Option<&Path>) -> Result<()> {
    let panel = data.load()?;
    let logit = LogitPanel::from_panel(&panel)?;
    let mut rows = Vec::new();
    for ((g, s), x) in &logit.series {
        let model = fit_fpca(x)?;
        let sel = k.select(&model);
        rows.push(json!({
            "group": g,
            "sex": s,
            "k": sel.k,
            "k_max": sel.k_max,
            "eta": sel.eta,
            "eigenvalues": model.eigenvalues(),
            "explained_variance_ratio": model.explained_variance_ratio(),
        }));
    }
    let text = serde_json::to_string_pretty(&rows)? + "\n";
    match output {
        Some(p) => write(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn forecast(data: &DataArgs, model: &ModelArgs, horizon: usize, output: &Path) -> Result<()> {
    let panel = data.load()?;
    let logit = LogitPanel::from_panel(&panel)?;
    let spec = model.spec();
    let last = panel.years().last();
    let fc = forecast_panel(&logit, &spec, horizon, &AutoEts)?;
    let dens = panel_densities(&fc, panel.radix(), spec.kind, last)?;
    let header: Vec<String> = panel.grid().ages().map(|a| a.to_string()).collect();
    for ((g, s), d) in &dens {
        let mut out = format!("year,horizon,{}\n", header.join(","));
        for h in 1..=d.horizon() {
            csv_row(&mut out, &format!("{},{h}", last + h as i32), d.step(h));
        }
        write(&output.join(format!("{g}_{}.csv", s.code())), &out)?;
    }
    write(&output.join("fits.json"), &(serde_json::to_string_pretty(&fc.reports)? + "\n"))?;
    println!("{} forecasts for {} series written to {}", spec.kind, dens.len(), output.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn interval(
    data: &DataArgs,
    model: &ModelArgs,
    method: IntervalMethod,
    alpha: f64,
    horizon: usize,
    split: &[f64],
    output: &Path,
) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        bail!(Error::Config(format!("alpha {alpha} is outside (0, 1)")));
    }
    let [a, b, c] = split else {
        bail!(Error::Config("--split takes three proportions".into()));
    };
    let panel = data.load()?;
    let logit = LogitPanel::from_panel(&panel)?;
    let spec = model.spec();
    let split = split_years(panel.years(), [*a, *b, *c])?;
    let plans = plans(
        &split,
        &BacktestConfig {
            point_horizon: horizon,
            interval_horizon: horizon,
        },
    )?;
    let validation = run_expanding_window(&logit, &plans.validation, &spec, &AutoEts)?;
    let h_max = plans.validation.max_horizon;
    let last = panel.years().last();
    let fc = forecast_panel(&logit, &spec, h_max, &AutoEts)?;
    let dens = panel_densities(&fc, panel.radix(), spec.kind, last)?;
    let header: Vec<String> = panel.grid().ages().map(|a| a.to_string()).collect();
    let mut cals = Vec::new();
    for ((g, s), d) in &dens {
        let cube = &validation.cubes[&(g.clone(), *s)];
        let actual = panel.series(g, *s).context("series present")?.values();
        let mut lower = format!("year,horizon,{}\n", header.join(","));
        let mut upper = lower.clone();
        for h in 1..=h_max {
            let p = cube.pairs(h, actual, panel.years(), plans.validation.final_year);
            let cal = match collect_residuals(h, &p.actual, &p.forecast).and_then(|bank| calibrate(&bank, method, alpha)) {
                Ok(c) => c,
                Err(e) => {
                    log::warn!("{g} {s} h={h}: {e}");
                    continue;
                }
            };
            let iv = interval_from_point(&d.step(h), &cal)?;
            let prefix = format!("{},{h}", last + h as i32);
            csv_row(&mut lower, &prefix, iv.lower.iter().copied());
            csv_row(&mut upper, &prefix, iv.upper.iter().copied());
            cals.push(json!({ "group": g, "sex": s, "horizon": h, "bank_size": p.years.len(), "calibration": cal }));
        }
        write(&output.join(format!("{g}_{}_lower.csv", s.code())), &lower)?;
        write(&output.join(format!("{g}_{}_upper.csv", s.code())), &upper)?;
    }
    write(&output.join("calibration.json"), &(serde_json::to_string_pretty(&cals)? + "\n"))?;
    println!("{method} intervals at alpha {alpha} written to {}", output.display());
    Ok(())
}

fn report(summary: &pipeline::RunSummary) {
    let mut msg = String::new();
    let _ = write!(
        msg,
        "wrote {} files to {} (manifest sha256 {})",
        summary.files,
        summary.output.display(),
        summary.manifest_sha256
    );
    if summary.notes > 0 {
        let _ = write!(msg, "; {} notes in manifest", summary.notes);
    }
    println!("{msg}");
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Transform { data, output } => transform(&data, &output),
        Command::Fpca { data, k, output } => fpca(&data, k, output.as_deref()),
        Command::Forecast {
            data,
            model,
            horizon,
            output,
        } => forecast(&data, &model, horizon, &output),
        Command::Interval {
            data,
            model,
            method,
            alpha,
            horizon,
            split,
            output,
        } => interval(&data, &model, method, alpha, horizon, &split, &output),
        Command::Evaluate {
            data,
            models,
            k,
            alphas,
            methods,
            output,
        } => {
            let mut cfg = RunConfig::from_toml_str("output = \"\"\n[data]\n")?;
            cfg.output = output;
            cfg.seed = data.seed;
            cfg.data = data.config();
            cfg.models = models;
            cfg.selection = k;
            cfg.alphas = alphas;
            cfg.methods = methods;
            report(&pipeline::run(&cfg)?);
            Ok(())
        }
        Command::Run {
            config,
            output,
            seed,
            models,
        } => {
            let mut cfg = RunConfig::from_file(&config)?;
            if let Some(o) = output {
                cfg.output = o;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(m) = models {
                cfg.models = m;
            }
            report(&pipeline::run(&cfg)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} workers: {e}");
            return ExitCode::FAILURE;
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = matches!(e.downcast_ref::<Error>(), Some(Error::Config(_)));
            if usage {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
