use std::path::Path;

use serde::{Deserialize, Serialize};

use super::series::{compute_margins, FlowgateSeries};
use super::synth::SynthConfig;
use super::windows::{Dataset, DatasetSplit};
use crate::error::{Error, Result};

/// Everything needed to rebuild the windowed dataset from the series CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    /// Series CSV path, relative to the manifest's directory.
    pub series: String,
    pub n_vars: usize,
    pub n_features: usize,
    pub interval_minutes: u32,
    pub lag_steps: usize,
    pub lead_steps: usize,
    pub seed: u64,
    pub split: DatasetSplit,
    /// Generator settings when the series is synthetic.
    #[serde(default)]
    pub synth: Option<SynthConfig>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Read the series next to `manifest_path` and window it with `lag`
    /// rows (the manifest's lag when `None`).
    pub fn load_dataset(
        &self,
        manifest_path: &Path,
        lag: Option<usize>,
    ) -> Result<(FlowgateSeries, Dataset)> {
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let series = FlowgateSeries::read_csv(std::fs::File::open(dir.join(&self.series))?)?;
        if series.n_vars() != self.n_vars || series.n_features() != self.n_features {
            return Err(Error::invalid("series columns do not match the manifest"));
        }
        let margins = compute_margins(&series)?;
        let data = Dataset::new(
            &series.features,
            &margins,
            lag.unwrap_or(self.lag_steps),
            self.lead_steps,
        )?;
        Ok((series, data))
    }
}
