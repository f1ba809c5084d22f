use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_global_norm, AdamConfig, AdamState, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::jdan::tape::{self, points_tensor};
use crate::jdan::{JdanArch, MarginScale, DENSITY_FLOOR};
use crate::nfn::{forward, BatchStats, BnMode, ForecastModel, NfnArch, NfnVars};
use crate::par;
use crate::pipeline::{feature_refs, targets, Dataset, SampleWindow};

/// Windows per graph when scoring a split.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-3,
            patience: 20,
            max_epochs: 300,
            clip_norm: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2"));
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.clip_norm > 0.0) {
            return Err(Error::invalid(
                "learning rate must be >= 0 and clip norm > 0",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean log-likelihood (higher is better).
    pub train_ll: f64,
    pub val_ll: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub stop_epoch: usize,
    pub best_epoch: usize,
    pub best_val_ll: f64,
    pub stopped_early: bool,
    /// Epoch whose training step produced a non-finite loss, if any.
    pub diverged: Option<usize>,
}

/// Unit-space targets as a `[B, N, 1]` constant.
fn target_points(g: &mut Graph, scale: &MarginScale, batch: &[&SampleWindow]) -> Result<Var> {
    let n = scale.loc.len();
    let pts: Vec<Vec<Vec<f64>>> = batch
        .iter()
        .map(|w| vec![(0..n).map(|i| scale.to_unit(i, w.target[i])).collect()])
        .collect();
    g.constant(points_tensor(&pts, n)?)
}

/// Per-sample log densities `[B]` of the batch targets.
pub fn batch_log_density(
    g: &mut Graph,
    model: &ForecastModel,
    vars: &NfnVars,
    batch: &[&SampleWindow],
    mode: BnMode,
) -> Result<(Var, Option<BatchStats>)> {
    let feats: Vec<&[f64]> = batch.iter().map(|w| w.features.as_slice()).collect();
    let (tp, stats) = forward(g, &model.nfn, &model.params, vars, &feats, mode)?;
    let z = target_points(g, &model.margin_scale, batch)?;
    let ld = tape::log_density(g, &model.jdan, &tp, z, model.margin_scale.log_jacobian())?;
    Ok((ld, stats))
}

/// Negative mean log-likelihood of the batch, floored per sample.
pub fn mle_loss(
    g: &mut Graph,
    model: &ForecastModel,
    vars: &NfnVars,
    batch: &[&SampleWindow],
    mode: BnMode,
) -> Result<(Var, Option<BatchStats>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let (ld, stats) = batch_log_density(g, model, vars, batch, mode)?;
    let m = g.mean(ld)?;
    let loss = g.neg(m)?;
    if !g.value(loss).all_finite() {
        return Err(Error::NonFinite("mle loss"));
    }
    Ok((loss, stats))
}

/// Infer-mode mean log-likelihood over `windows`.
pub fn mean_log_likelihood(model: &ForecastModel, windows: &[SampleWindow]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::invalid("no windows to score"));
    }
    let chunks: Vec<&[SampleWindow]> = windows.chunks(EVAL_CHUNK).collect();
    let sums = par::map_slice(&chunks, |c| -> Result<f64> {
        let mut g = Graph::new();
        let vars = model.params.bind(&mut g, false)?;
        let refs: Vec<&SampleWindow> = c.iter().collect();
        let (ld, _) = batch_log_density(&mut g, model, &vars, &refs, BnMode::Infer)?;
        Ok(g.value(ld).data().iter().sum())
    });
    let mut total = 0.0;
    for s in sums {
        total += s?;
    }
    Ok(total / windows.len() as f64)
}

/// One optimizer step on `batch`; returns the pre-step loss.
pub fn train_step(
    model: &mut ForecastModel,
    adam: &mut AdamState,
    batch: &[&SampleWindow],
    clip_norm: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.params.bind(&mut g, true)?;
    let (loss, stats) = mle_loss(&mut g, model, &vars, batch, BnMode::Train)?;
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss)?;
    let mut gs: Vec<Tensor> = vars.all().into_iter().map(|v| grads.take(v)).collect();
    clip_global_norm(&mut gs, clip_norm);
    adam.step(&mut model.params.trainable_mut(), &gs)?;
    if let Some(s) = stats {
        model.params.bn.update(&s);
    }
    Ok(value)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Train by maximum likelihood with early stopping; returns the model with
/// the best validation log-likelihood.
pub fn fit(
    mut model: ForecastModel,
    train: &[SampleWindow],
    val: &[SampleWindow],
    cfg: &TrainConfig,
) -> Result<(ForecastModel, TrainReport)> {
    cfg.validate()?;
    if train.len() < 2 || val.is_empty() {
        return Err(Error::invalid(
            "training needs >= 2 train and >= 1 validation windows",
        ));
    }
    model.calibrate_batch_norm(&feature_refs(train))?;
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.learning_rate,
            ..AdamConfig::default()
        },
        &model.params.trainable(),
    );
    let record = |m: &ForecastModel, epoch: usize| -> Result<EpochRecord> {
        Ok(EpochRecord {
            epoch,
            train_ll: mean_log_likelihood(m, train)?,
            val_ll: mean_log_likelihood(m, val)?,
        })
    };
    let first = record(&model, 0)?;
    let mut best = model.clone();
    let mut report = TrainReport {
        best_epoch: 0,
        best_val_ll: first.val_ll,
        epochs: vec![first],
        stop_epoch: 0,
        stopped_early: false,
        diverged: None,
    };
    let mut streak = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch));
        order.sort_unstable();
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            if idx.len() < 2 {
                continue;
            }
            let batch: Vec<&SampleWindow> = idx.iter().map(|&i| &train[i]).collect();
            match train_step(&mut model, &mut adam, &batch, cfg.clip_norm) {
                Ok(_) => {}
                Err(e) if e.is_numeric() => {
                    report.diverged = Some(epoch);
                    report.stop_epoch = epoch;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let rec = match record(&model, epoch) {
            Ok(r) => r,
            Err(e) if e.is_numeric() => {
                report.diverged = Some(epoch);
                report.stop_epoch = epoch;
                break;
            }
            Err(e) => return Err(e),
        };
        report.stop_epoch = epoch;
        if rec.val_ll > report.best_val_ll {
            report.best_val_ll = rec.val_ll;
            report.best_epoch = epoch;
            best = model.clone();
        }
        streak = if rec.train_ll > rec.val_ll {
            streak + 1
        } else {
            0
        };
        report.epochs.push(rec);
        if streak >= cfg.patience {
            report.stopped_early = true;
            break;
        }
    }
    Ok((best, report))
}

/// Fit the margin scale on the train targets, initialize from `cfg.seed`
/// and train.
pub fn train_model(
    nfn: NfnArch,
    jdan: JdanArch,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ForecastModel, TrainReport)> {
    if nfn.n_features != data.n_features
        || nfn.lag_steps != data.lag
        || jdan.n_vars != data.n_vars()
    {
        return Err(Error::invalid("architecture does not match the dataset"));
    }
    let scale = MarginScale::fit(&targets(data.train()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = ForecastModel::new(nfn, jdan, scale, &mut rng)?;
    let (model, report) = fit(model, data.train(), data.val(), cfg)?;
    if report.diverged.is_some() && report.best_epoch == 0 && report.epochs.len() == 1 {
        return Err(Error::Diverged {
            epoch: report.diverged.unwrap_or(0),
        });
    }
    Ok((model, report))
}

/// `−ln DENSITY_FLOOR`, the largest per-sample loss.
pub fn floor_loss() -> f64 {
    -DENSITY_FLOOR.ln()
}
