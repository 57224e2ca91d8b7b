use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpca::SelectionPolicy;
use crate::intervals::IntervalMethod;
use crate::models::{ModelKind, ModelSpec, DEFAULT_FACTORS, DEFAULT_P0};
use crate::panel::LoadOptions;
use crate::synth::SynthConfig;

/// A batch run, usually read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Run directory; replaced atomically on success.
    pub output: PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default = "default_models")]
    pub models: Vec<String>,
    /// `"evr"` or a fixed number of components.
    #[serde(default = "default_selection")]
    pub selection: String,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    /// Train / validation / test proportions.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default)]
    pub backtest: BacktestConfig,
    #[serde(default)]
    pub hdfpca: HdfpcaConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
}

/// Exactly one of `path` or `synthetic`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub synthetic: Option<SynthConfig>,
    #[serde(default)]
    pub load: LoadOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    pub point_horizon: usize,
    pub interval_horizon: usize,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            point_horizon: 16,
            interval_horizon: 15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HdfpcaConfig {
    pub p0: usize,
    pub r: usize,
}

impl Default for HdfpcaConfig {
    fn default() -> Self {
        Self {
            p0: DEFAULT_P0,
            r: DEFAULT_FACTORS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub max_lag: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self { max_lag: 10 }
    }
}

fn default_seed() -> u64 {
    1
}

fn default_models() -> Vec<String> {
    ModelKind::ALL.iter().map(|m| m.name().to_string()).collect()
}

fn default_selection() -> String {
    "evr".into()
}

fn default_alphas() -> Vec<f64> {
    vec![0.2, 0.05]
}

fn default_methods() -> Vec<String> {
    vec!["sd".into(), "conformal".into()]
}

fn default_split() -> [f64; 3] {
    [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]
}

/// Validated, typed view of a [`RunConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub models: Vec<ModelSpec>,
    pub selection: SelectionPolicy,
    pub methods: Vec<IntervalMethod>,
    pub alphas: Vec<f64>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it are taken relative to the file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.output.is_relative() {
            cfg.output = base.join(&cfg.output);
        }
        if let Some(p) = &cfg.data.path {
            if p.is_relative() {
                cfg.data.path = Some(base.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn settings(&self) -> Result<RunSettings> {
        match (&self.data.path, &self.data.synthetic) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => return Err(Error::Config("set exactly one of data.path and data.synthetic".into())),
        }
        let selection: SelectionPolicy = self.selection.parse()?;
        let mut kinds = self
            .models
            .iter()
            .map(|m| m.parse::<ModelKind>())
            .collect::<Result<Vec<_>>>()?;
        if kinds.is_empty() {
            return Err(Error::Config("no models requested".into()));
        }
        kinds.sort();
        kinds.dedup();
        let models: Vec<ModelSpec> = kinds
            .into_iter()
            .map(|k| ModelSpec {
                p0: self.hdfpca.p0,
                r: self.hdfpca.r,
                ..ModelSpec::new(k, selection)
            })
            .collect();
        for m in &models {
            m.validate()?;
        }
        let mut methods = self
            .methods
            .iter()
            .map(|m| m.parse::<IntervalMethod>())
            .collect::<Result<Vec<_>>>()?;
        methods.sort();
        methods.dedup();
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(Error::Config(format!("alpha {a} is outside (0, 1)")));
        }
        if self.backtest.point_horizon == 0 || self.backtest.interval_horizon == 0 {
            return Err(Error::Config("backtest horizons must be at least 1".into()));
        }
        Ok(RunSettings {
            models,
            selection,
            methods,
            alphas: self.alphas.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEMO: &str = r#"
output = "out"
seed = 7
models = ["ufts", "HDFPCA", "mfts"]
alphas = [0.2]

[data.synthetic]
groups = 2
years = 12
"#;

    #[test]
    fn parses_and_validates() {
        let cfg = RunConfig::from_toml_str(DEMO).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.data.synthetic.as_ref().unwrap().years, 12);
        let s = cfg.settings().unwrap();
        let kinds: Vec<ModelKind> = s.models.iter().map(|m| m.kind).collect();
        assert_eq!(kinds, vec![ModelKind::Ufts, ModelKind::Mfts, ModelKind::Hdfpca]);
        assert_eq!(s.methods, vec![IntervalMethod::Sd, IntervalMethod::Conformal]);
        assert_eq!(s.selection, SelectionPolicy::Evr);
    }

    #[test]
    fn unknown_model() {
        let cfg = RunConfig::from_toml_str(&DEMO.replace("\"mfts\"", "\"lee-carter\"")).unwrap();
        let e = cfg.settings().unwrap_err();
        assert!(e.to_string().contains("lee-carter"), "{e}");
    }

    #[test]
    fn unknown_key() {
        assert!(RunConfig::from_toml_str(&format!("{DEMO}\nbogus = 1\n")).is_err());
    }

    #[test]
    fn bad_alpha_and_data() {
        let cfg = RunConfig::from_toml_str(&DEMO.replace("[0.2]", "[1.5]")).unwrap();
        assert!(cfg.settings().is_err());
        let mut cfg = RunConfig::from_toml_str(DEMO).unwrap();
        cfg.data.path = Some("x.csv".into());
        assert!(cfg.settings().is_err());
    }
}
