//! Univariate forecasters (the engine at N = 1) used as copula marginals.

use crate::error::{Error, Result};
use crate::jdan::{ForecastDistribution, JdanArch};
use crate::nfn::{ForecastModel, NfnArch};
use crate::pipeline::{feature_refs, Dataset, GroundTruth, Mvn, SampleWindow};
use crate::trainer::{train_model, TrainConfig, TrainReport};

/// The dataset restricted to margin `i`.
pub fn single_margin(data: &Dataset, i: usize) -> Result<Dataset> {
    if i >= data.n_vars() {
        return Err(Error::invalid(format!(
            "margin {} of {}",
            i + 1,
            data.n_vars()
        )));
    }
    let windows = data
        .windows
        .iter()
        .map(|w| SampleWindow {
            features: w.features.clone(),
            target: vec![w.target[i]],
            anchor: w.anchor,
        })
        .collect();
    Ok(Dataset {
        windows,
        split: data.split.clone(),
        lag: data.lag,
        lead: data.lead,
        n_features: data.n_features,
    })
}

/// Train one N = 1 model per margin. `jdan` supplies everything but the
/// variable count.
pub fn marginal_models(
    nfn: NfnArch,
    jdan: JdanArch,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<(ForecastModel, TrainReport)>> {
    (0..data.n_vars())
        .map(|i| {
            let arch = JdanArch::new(
                1,
                jdan.n_components,
                jdan.n_blocks,
                jdan.width,
                jdan.coupling,
            )?;
            let cfg = TrainConfig {
                seed: cfg.seed.wrapping_add(i as u64 + 1),
                ..cfg.clone()
            };
            train_model(nfn.clone(), arch, &single_margin(data, i)?, &cfg)
        })
        .collect()
}

/// Forecasts `[i][k]` of each marginal model over `windows`.
pub fn marginal_forecasts(
    models: &[ForecastModel],
    windows: &[SampleWindow],
) -> Result<Vec<Vec<ForecastDistribution>>> {
    models
        .iter()
        .map(|m| m.predict(&feature_refs(windows)))
        .collect()
}

/// Exact target laws of the windows under the generator.
pub fn oracle_laws(truth: &GroundTruth, windows: &[SampleWindow]) -> Result<Vec<Mvn>> {
    windows.iter().map(|w| truth.target_law(w.anchor)).collect()
}
