use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::batchnorm::{BatchNorm, BatchStats, BnMode};
use super::lstm::{lstm_sequence, uniform, LstmLayer, LstmVars};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::jdan::tape::TapeParams;
use crate::jdan::{
    CouplingMode, FlatParams, ForecastDistribution, JdanArch, JdanParams, MarginScale,
};
use crate::par;

/// Bias of the SoftPlus head at initialization; softplus(-2) ≈ 0.127.
pub const WEIGHT_HEAD_BIAS: f64 = -2.0;

/// Windows per graph when running inference.
const INFER_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NfnArch {
    pub n_features: usize,
    /// Window rows δ.
    pub lag_steps: usize,
    /// Residual blocks N_N, each two LSTM layers.
    pub n_blocks: usize,
    /// W_N.
    pub width: usize,
}

impl NfnArch {
    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 || self.lag_steps == 0 || self.width == 0 {
            return Err(Error::invalid(format!(
                "NFN extents must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        self.lag_steps * self.n_features
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmBlock {
    pub first: LstmLayer,
    pub second: LstmLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub w: Tensor,
    pub b: Tensor,
}

impl Head {
    fn init<R: Rng + ?Sized>(input: usize, out: usize, bias: f64, rng: &mut R) -> Self {
        Head {
            w: uniform(rng, &[input, out], 1.0 / (input as f64).sqrt()),
            b: Tensor::full(&[out], bias),
        }
    }
}

/// Trainable NFN parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NfnParams {
    pub input: LstmLayer,
    pub blocks: Vec<LstmBlock>,
    pub bn: BatchNorm,
    pub fc: Head,
    pub weight_head: Head,
    pub bias_head: Head,
    pub logit_head: Option<Head>,
}

#[derive(Clone, Debug)]
pub struct NfnVars {
    pub input: LstmVars,
    pub blocks: Vec<(LstmVars, LstmVars)>,
    pub bn_scale: Var,
    pub bn_shift: Var,
    pub fc: (Var, Var),
    pub weight_head: (Var, Var),
    pub bias_head: (Var, Var),
    pub logit_head: Option<(Var, Var)>,
}

impl NfnVars {
    /// Same order as [`NfnParams::trainable`].
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.input.all().to_vec();
        for (a, b) in &self.blocks {
            v.extend(a.all());
            v.extend(b.all());
        }
        v.extend([self.bn_scale, self.bn_shift, self.fc.0, self.fc.1]);
        v.extend([
            self.weight_head.0,
            self.weight_head.1,
            self.bias_head.0,
            self.bias_head.1,
        ]);
        if let Some((w, b)) = self.logit_head {
            v.extend([w, b]);
        }
        v
    }
}

impl NfnParams {
    pub fn init<R: Rng + ?Sized>(arch: &NfnArch, jdan: &JdanArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        jdan.validate()?;
        let w = arch.width;
        let input = LstmLayer::init(arch.n_features, w, rng);
        let blocks = (0..arch.n_blocks)
            .map(|_| LstmBlock {
                first: LstmLayer::init(w, w, rng),
                second: LstmLayer::init(w, w, rng),
            })
            .collect();
        let fc = Head::init(w, w, 0.0, rng);
        let weight_head = Head::init(w, jdan.weight_count(), WEIGHT_HEAD_BIAS, rng);
        let bias_head = Head::init(w, jdan.bias_count(), 0.0, rng);
        let logit_head = match jdan.coupling {
            CouplingMode::Mixture => Some(Head::init(w, jdan.n_components, 0.0, rng)),
            CouplingMode::PaperLiteral => None,
        };
        Ok(NfnParams {
            input,
            blocks,
            bn: BatchNorm::new(w),
            fc,
            weight_head,
            bias_head,
            logit_head,
        })
    }

    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.input.tensors().to_vec();
        for b in &self.blocks {
            v.extend(b.first.tensors());
            v.extend(b.second.tensors());
        }
        v.extend([&self.bn.scale, &self.bn.shift, &self.fc.w, &self.fc.b]);
        v.extend([&self.weight_head.w, &self.weight_head.b]);
        v.extend([&self.bias_head.w, &self.bias_head.b]);
        if let Some(h) = &self.logit_head {
            v.extend([&h.w, &h.b]);
        }
        v
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.input.tensors_mut().into_iter().collect();
        for b in &mut self.blocks {
            v.extend(b.first.tensors_mut());
            v.extend(b.second.tensors_mut());
        }
        v.extend([
            &mut self.bn.scale,
            &mut self.bn.shift,
            &mut self.fc.w,
            &mut self.fc.b,
        ]);
        v.extend([&mut self.weight_head.w, &mut self.weight_head.b]);
        v.extend([&mut self.bias_head.w, &mut self.bias_head.b]);
        if let Some(h) = &mut self.logit_head {
            v.extend([&mut h.w, &mut h.b]);
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<NfnVars> {
        let leaf = |g: &mut Graph, t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let input = self.input.bind(g, trainable)?;
        let blocks = self
            .blocks
            .iter()
            .map(|b| Ok((b.first.bind(g, trainable)?, b.second.bind(g, trainable)?)))
            .collect::<Result<Vec<_>>>()?;
        let bn_scale = leaf(g, &self.bn.scale)?;
        let bn_shift = leaf(g, &self.bn.shift)?;
        let head = |g: &mut Graph, h: &Head| -> Result<(Var, Var)> {
            Ok((leaf(g, &h.w)?, leaf(g, &h.b)?))
        };
        let fc = head(g, &self.fc)?;
        let weight_head = head(g, &self.weight_head)?;
        let bias_head = head(g, &self.bias_head)?;
        let logit_head = match &self.logit_head {
            Some(h) => Some(head(g, h)?),
            None => None,
        };
        Ok(NfnVars {
            input,
            blocks,
            bn_scale,
            bn_shift,
            fc,
            weight_head,
            bias_head,
            logit_head,
        })
    }
}

/// One `[B, F]` constant per window row.
fn step_inputs(g: &mut Graph, arch: &NfnArch, windows: &[&[f64]]) -> Result<Vec<Var>> {
    let (d, f) = (arch.lag_steps, arch.n_features);
    if windows.is_empty() {
        return Err(Error::shape("nfn input", "empty batch"));
    }
    if let Some(w) = windows.iter().find(|w| w.len() != d * f) {
        return Err(Error::shape(
            "nfn input",
            format!("window has {} values, expected {d}x{f}", w.len()),
        ));
    }
    (0..d)
        .map(|k| {
            let data = windows
                .iter()
                .flat_map(|w| w[k * f..(k + 1) * f].iter().copied())
                .collect();
            g.constant(Tensor::new(vec![windows.len(), f], data)?)
        })
        .collect()
}

/// Residual LSTM stack; returns the final hidden state `[B, W]`.
pub fn encode(g: &mut Graph, arch: &NfnArch, vars: &NfnVars, windows: &[&[f64]]) -> Result<Var> {
    let xs = step_inputs(g, arch, windows)?;
    let mut seq = lstm_sequence(g, &vars.input, &xs, arch.width)?;
    for (a, b) in &vars.blocks {
        let mid = lstm_sequence(g, a, &seq, arch.width)?;
        let out = lstm_sequence(g, b, &mid, arch.width)?;
        seq = seq
            .iter()
            .zip(&out)
            .map(|(&s, &o)| g.add(s, o))
            .collect::<Result<Vec<_>>>()?;
    }
    Ok(*seq.last().expect("lag_steps >= 1"))
}

/// Full forward pass to JDAN parameters on the tape.
pub fn forward(
    g: &mut Graph,
    arch: &NfnArch,
    params: &NfnParams,
    vars: &NfnVars,
    windows: &[&[f64]],
    mode: BnMode,
) -> Result<(TapeParams, Option<BatchStats>)> {
    let h = encode(g, arch, vars, windows)?;
    let (z, stats) = params
        .bn
        .forward(g, h, vars.bn_scale, vars.bn_shift, mode)?;
    let z = g.matmul(z, vars.fc.0)?;
    let z = g.add(z, vars.fc.1)?;
    let z = g.tanh(z)?;
    let w = g.matmul(z, vars.weight_head.0)?;
    let w = g.add(w, vars.weight_head.1)?;
    let weights = g.softplus(w)?;
    let b = g.matmul(z, vars.bias_head.0)?;
    let biases = g.add(b, vars.bias_head.1)?;
    let logits = match vars.logit_head {
        Some((lw, lb)) => {
            let l = g.matmul(z, lw)?;
            Some(g.add(l, lb)?)
        }
        None => None,
    };
    Ok((
        TapeParams {
            weights,
            biases,
            logits,
        },
        stats,
    ))
}

/// A trained (or freshly initialized) forecaster: NFN parameters bound to
/// the JDAN they drive and the fixed margin scaling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastModel {
    pub nfn: NfnArch,
    pub jdan: JdanArch,
    pub margin_scale: MarginScale,
    pub params: NfnParams,
}

impl ForecastModel {
    pub fn new<R: Rng + ?Sized>(
        nfn: NfnArch,
        jdan: JdanArch,
        margin_scale: MarginScale,
        rng: &mut R,
    ) -> Result<Self> {
        margin_scale.validate(jdan.n_vars)?;
        let params = NfnParams::init(&nfn, &jdan, rng)?;
        Ok(ForecastModel {
            nfn,
            jdan,
            margin_scale,
            params,
        })
    }

    /// Final hidden states before batch normalization, one row per window.
    pub fn encode(&self, windows: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let chunks: Vec<&[&[f64]]> = windows.chunks(INFER_CHUNK).collect();
        let parts = par::map_slice(&chunks, |c| -> Result<Vec<Vec<f64>>> {
            let mut g = Graph::new();
            let vars = self.params.bind(&mut g, false)?;
            let h = encode(&mut g, &self.nfn, &vars, c)?;
            Ok(g.value(h)
                .data()
                .chunks(self.nfn.width)
                .map(<[f64]>::to_vec)
                .collect())
        });
        let mut out = Vec::with_capacity(windows.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Set batch-norm running statistics to the population statistics of
    /// the encoder output over `windows`.
    pub fn calibrate_batch_norm(&mut self, windows: &[&[f64]]) -> Result<()> {
        let hs = self.encode(windows)?;
        let n = hs.len() as f64;
        let w = self.nfn.width;
        let mut mean = vec![0.0; w];
        for h in &hs {
            for (m, v) in mean.iter_mut().zip(h) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; w];
        for h in &hs {
            for ((s, v), m) in var.iter_mut().zip(h).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        self.params.bn.set_running(&BatchStats { mean, var });
        Ok(())
    }

    /// Infer-mode JDAN parameters per window.
    pub fn predict_params(&self, windows: &[&[f64]]) -> Result<Vec<JdanParams>> {
        let chunks: Vec<&[&[f64]]> = windows.chunks(INFER_CHUNK).collect();
        let parts = par::map_slice(&chunks, |c| self.predict_chunk(c));
        let mut out = Vec::with_capacity(windows.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    fn predict_chunk(&self, windows: &[&[f64]]) -> Result<Vec<JdanParams>> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false)?;
        let (tp, _) = forward(
            &mut g,
            &self.nfn,
            &self.params,
            &vars,
            windows,
            BnMode::Infer,
        )?;
        let rows = |v: Var, n: usize| -> Vec<Vec<f64>> {
            g.value(v).data().chunks(n).map(<[f64]>::to_vec).collect()
        };
        let ws = rows(tp.weights, self.jdan.weight_count());
        let bs = rows(tp.biases, self.jdan.bias_count());
        let ls = match tp.logits {
            Some(l) => rows(l, self.jdan.n_components),
            None => vec![Vec::new(); windows.len()],
        };
        ws.into_iter()
            .zip(bs)
            .zip(ls)
            .map(|((weights, biases), logits)| {
                JdanParams::from_flat(
                    &self.jdan,
                    &FlatParams {
                        weights,
                        biases,
                        logits,
                    },
                )
            })
            .collect()
    }

    pub fn predict(&self, windows: &[&[f64]]) -> Result<Vec<ForecastDistribution>> {
        self.predict_params(windows)?
            .into_iter()
            .map(|p| ForecastDistribution::new(p, self.margin_scale.clone()))
            .collect()
    }
}

/// Serialized model with the seed and run configuration that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ForecastModel,
    pub seed: u64,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)?;
        c.model.nfn.validate()?;
        c.model.jdan.validate()?;
        c.model.margin_scale.validate(c.model.jdan.n_vars)?;
        if c.model.params.bn.width() != c.model.nfn.width {
            return Err(Error::invalid(
                "checkpoint batch norm width does not match arch",
            ));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
