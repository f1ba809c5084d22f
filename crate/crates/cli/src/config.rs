use std::path::{Path, PathBuf};

use anyhow::bail;
use mdc_core::analytics::SecurityThresholds;
use mdc_core::jdan::{CouplingMode, JdanArch};
use mdc_core::nfn::NfnArch;
use mdc_core::pipeline::SynthConfig;
use mdc_core::trainer::{GridSpace, TrainConfig};
use serde::{Deserialize, Serialize};

/// Marks errors caused by the configuration rather than the run.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Directory for every artifact.
    pub output: PathBuf,
    pub seed: u64,
    pub data: DataConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub grid: GridSpace,
    pub thresholds: Vec<f64>,
    /// Defaults to `<output>/checkpoint.json`.
    pub checkpoint: Option<PathBuf>,
    pub forecast: ForecastConfig,
    pub evaluate: EvaluateConfig,
    pub index: IndexConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output: PathBuf::from("out"),
            seed: 0,
            data: DataConfig::default(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            grid: GridSpace::default(),
            thresholds: SecurityThresholds::default().gamma,
            checkpoint: None,
            forecast: ForecastConfig::default(),
            evaluate: EvaluateConfig::default(),
            index: IndexConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Flowgates for the default generator.
    pub n_vars: usize,
    /// Rows to generate.
    pub length: usize,
    /// Full generator settings; overrides `n_vars` and the seed.
    pub synth: Option<SynthConfig>,
    /// Defaults to `<output>/manifest.json`.
    pub manifest: Option<PathBuf>,
    /// Window rows recorded in the manifest.
    pub lag_steps: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_vars: 3,
            length: 10_000,
            synth: None,
            manifest: None,
            lag_steps: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub nfn_blocks: usize,
    pub nfn_width: usize,
    pub jdan_blocks: usize,
    pub jdan_width: usize,
    pub n_components: usize,
    pub coupling: CouplingMode,
    /// Overrides the manifest's window rows.
    pub lag_steps: Option<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            nfn_blocks: 8,
            nfn_width: 64,
            jdan_blocks: 4,
            jdan_width: 64,
            n_components: 8,
            coupling: CouplingMode::Mixture,
            lag_steps: None,
        }
    }
}

impl ArchConfig {
    pub fn build(
        &self,
        n_vars: usize,
        n_features: usize,
        lag: usize,
    ) -> anyhow::Result<(NfnArch, JdanArch)> {
        let nfn = NfnArch {
            n_features,
            lag_steps: lag,
            n_blocks: self.nfn_blocks,
            width: self.nfn_width,
        };
        nfn.validate().map_err(|e| ConfigError(e.to_string()))?;
        let jdan = JdanArch::new(
            n_vars,
            self.n_components,
            self.jdan_blocks,
            self.jdan_width,
            self.coupling,
        )
        .map_err(|e| ConfigError(e.to_string()))?;
        Ok((nfn, jdan))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastConfig {
    /// Test-split window indices.
    pub windows: Vec<usize>,
    pub quantiles: Vec<f64>,
    pub grid_points: usize,
    /// Plot range padding beyond the training targets.
    pub padding: f64,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        ForecastConfig {
            windows: vec![0],
            quantiles: vec![0.05, 0.5, 0.95],
            grid_points: 200,
            padding: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub mkde: bool,
    pub clayton: Vec<f64>,
    pub frank: Vec<f64>,
    /// Score the generator's exact laws when the data are synthetic.
    pub oracle: bool,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            mkde: true,
            clayton: vec![0.5, 1.0, 1.5],
            frank: vec![0.5, 1.0, 1.5],
            oracle: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndexConfig {
    /// Test-split window indices.
    pub windows: Vec<usize>,
    /// Monte-Carlo samples for the cross-check; 0 disables it.
    pub mc_samples: usize,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            windows: vec![0],
            mc_samples: 0,
        }
    }
}

impl RunConfig {
    /// Parse TOML for `.toml` paths and JSON otherwise.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| ConfigError(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| ConfigError(e.to_string()))?
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let check = || -> anyhow::Result<()> {
            self.train.validate()?;
            SecurityThresholds::new(self.thresholds.clone())?;
            if self.forecast.grid_points < 2 {
                bail!("forecast grid needs at least 2 points");
            }
            if self
                .forecast
                .quantiles
                .iter()
                .any(|q| !(*q > 0.0 && *q < 1.0))
            {
                bail!("quantile levels must lie in (0, 1)");
            }
            for t in self.evaluate.clayton.iter().chain(&self.evaluate.frank) {
                if !(t.is_finite() && *t != 0.0) {
                    bail!("copula θ must be finite and non-zero");
                }
            }
            if let Some(s) = &self.data.synth {
                s.validate()?;
            }
            if self.arch.coupling == CouplingMode::PaperLiteral && self.arch.n_components != 1 {
                bail!("paper-literal coupling needs n_components = 1");
            }
            Ok(())
        };
        check().map_err(|e| ConfigError(e.to_string()).into())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.data
            .manifest
            .clone()
            .unwrap_or_else(|| self.output.join("manifest.json"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.output.join("checkpoint.json"))
    }

    pub fn synth(&self) -> SynthConfig {
        match &self.data.synth {
            Some(s) => s.clone(),
            None => SynthConfig {
                seed: self.seed,
                ..SynthConfig::with_vars(self.data.n_vars)
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}
