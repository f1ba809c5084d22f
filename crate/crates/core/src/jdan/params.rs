use rand::Rng;
use serde::{Deserialize, Serialize};

use super::arch::{CouplingMode, JdanArch};
use super::unit::MonotoneUnit;
use crate::error::{Error, Result};

/// Full parameter set of a JDAN: one monotone unit per (component,
/// variable) pair plus mixture logits.
#[derive(Clone, Debug, PartialEq)]
pub struct JdanParams {
    arch: JdanArch,
    units: Vec<MonotoneUnit>,
    logits: Vec<f64>,
}

/// Flat form as emitted by the forecast network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatParams {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub logits: Vec<f64>,
}

impl JdanParams {
    pub fn from_flat(arch: &JdanArch, flat: &FlatParams) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        if flat.weights.len() != arch.weight_count()
            || flat.biases.len() != arch.bias_count()
            || flat.logits.len() != arch.logit_count()
        {
            return Err(Error::shape(
                "jdan params",
                format!(
                    "expected {}/{}/{} weights/biases/logits, got {}/{}/{}",
                    arch.weight_count(),
                    arch.bias_count(),
                    arch.logit_count(),
                    flat.weights.len(),
                    flat.biases.len(),
                    flat.logits.len()
                ),
            ));
        }
        if flat.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mixture logits"));
        }
        let (uw, ub) = (layout.weight_count(), layout.bias_count());
        let units = (0..arch.n_units())
            .map(|u| {
                MonotoneUnit::from_flat(
                    layout,
                    flat.weights[u * uw..(u + 1) * uw].to_vec(),
                    flat.biases[u * ub..(u + 1) * ub].to_vec(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(JdanParams {
            arch: arch.clone(),
            units,
            logits: flat.logits.clone(),
        })
    }

    pub fn to_flat(&self) -> FlatParams {
        FlatParams {
            weights: self
                .units
                .iter()
                .flat_map(|u| u.weights().to_vec())
                .collect(),
            biases: self
                .units
                .iter()
                .flat_map(|u| u.biases().to_vec())
                .collect(),
            logits: self.logits.clone(),
        }
    }

    pub fn arch(&self) -> &JdanArch {
        &self.arch
    }

    pub fn unit(&self, m: usize, i: usize) -> &MonotoneUnit {
        &self.units[self.arch.unit_index(m, i)]
    }

    pub fn units(&self) -> &[MonotoneUnit] {
        &self.units
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Softmax of the logits; `[1.0]` in paper-literal mode.
    pub fn mixture_weights(&self) -> Vec<f64> {
        if self.arch.coupling == CouplingMode::PaperLiteral {
            return vec![1.0];
        }
        let mx = self
            .logits
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.logits.iter().map(|l| (l - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    /// Random parameters whose CDFs transition inside the unit interval of
    /// the units' input coordinates.
    pub fn random<R: Rng + ?Sized>(
        arch: &JdanArch,
        init: &RandomInit,
        rng: &mut R,
    ) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let w = layout.width;
        let mut weights = Vec::with_capacity(arch.weight_count());
        let mut biases = Vec::with_capacity(arch.bias_count());
        let draw = |rng: &mut R, (lo, hi): (f64, f64)| {
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        };
        for _ in 0..arch.n_units() {
            let mut input_w = Vec::with_capacity(w);
            for _ in 0..w {
                let wi = draw(rng, init.input_weight);
                let c = draw(rng, init.center);
                input_w.push(wi);
                biases.push(-wi * c);
            }
            weights.extend(input_w);
            for _ in 0..layout.n_blocks * super::arch::LAYERS_PER_BLOCK {
                for _ in 0..w * w {
                    weights.push(draw(rng, init.hidden_weight) / w as f64);
                }
                for _ in 0..w {
                    biases.push(draw(rng, init.hidden_bias));
                }
            }
            for _ in 0..w {
                weights.push(draw(rng, init.output_weight));
            }
            biases.push(draw(rng, init.hidden_bias));
        }
        let logits = (0..arch.logit_count())
            .map(|_| draw(rng, init.logit))
            .collect();
        Self::from_flat(
            arch,
            &FlatParams {
                weights,
                biases,
                logits,
            },
        )
    }
}

/// Ranges for [`JdanParams::random`]. Hidden weights are divided by the
/// width so pre-activations stay O(1).
#[derive(Clone, Debug)]
pub struct RandomInit {
    pub input_weight: (f64, f64),
    pub center: (f64, f64),
    pub hidden_weight: (f64, f64),
    pub hidden_bias: (f64, f64),
    pub output_weight: (f64, f64),
    pub logit: (f64, f64),
}

impl Default for RandomInit {
    fn default() -> Self {
        RandomInit {
            input_weight: (8.0, 16.0),
            center: (0.3, 0.7),
            hidden_weight: (0.5, 4.0),
            hidden_bias: (-2.0, 2.0),
            output_weight: (0.2, 2.0),
            logit: (-1.0, 1.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flat_round_trip_and_count() {
        let arch = JdanArch::new(2, 3, 2, 4, CouplingMode::Mixture).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = JdanParams::random(&arch, &RandomInit::default(), &mut rng).unwrap();
        let flat = p.to_flat();
        assert_eq!(
            flat.weights.len() + flat.biases.len() + flat.logits.len(),
            arch.param_count()
        );
        assert_eq!(JdanParams::from_flat(&arch, &flat).unwrap(), p);
        let w = p.mixture_weights();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn from_flat_enforces_positivity_and_count() {
        let arch = JdanArch::new(1, 1, 1, 2, CouplingMode::PaperLiteral).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut flat = JdanParams::random(&arch, &RandomInit::default(), &mut rng)
            .unwrap()
            .to_flat();
        flat.weights[3] = 0.0;
        assert!(matches!(
            JdanParams::from_flat(&arch, &flat),
            Err(Error::NonPositiveWeight { .. })
        ));
        flat.weights.pop();
        assert!(JdanParams::from_flat(&arch, &flat).is_err());
    }
}
