use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden layers inside one residual block of a monotone unit.
pub const LAYERS_PER_BLOCK: usize = 2;

/// How per-variable normalized units are combined into the joint CDF.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CouplingMode {
    /// `F = (∏ Φ̄ᵢ)²`, a product form with independent coordinates.
    PaperLiteral,
    /// `F = Σₘ πₘ ∏ᵢ Φ̄ᵢₘ` with softmax mixture weights.
    #[default]
    Mixture,
}

impl std::str::FromStr for CouplingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-literal" => Ok(CouplingMode::PaperLiteral),
            "mixture" => Ok(CouplingMode::Mixture),
            other => Err(Error::invalid(format!("unknown coupling mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JdanArch {
    pub n_vars: usize,
    pub n_components: usize,
    pub n_blocks: usize,
    pub width: usize,
    #[serde(default)]
    pub coupling: CouplingMode,
}

impl JdanArch {
    pub fn new(
        n_vars: usize,
        n_components: usize,
        n_blocks: usize,
        width: usize,
        coupling: CouplingMode,
    ) -> Result<Self> {
        let arch = JdanArch {
            n_vars,
            n_components,
            n_blocks,
            width,
            coupling,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_vars == 0 || self.n_components == 0 || self.n_blocks == 0 || self.width == 0 {
            return Err(Error::invalid(format!(
                "all JDAN extents must be positive: {self:?}"
            )));
        }
        if self.coupling == CouplingMode::PaperLiteral && self.n_components != 1 {
            return Err(Error::invalid(
                "paper-literal coupling requires exactly one component",
            ));
        }
        Ok(())
    }

    pub fn n_units(&self) -> usize {
        self.n_vars * self.n_components
    }

    /// Index of the unit for component `m`, variable `i`.
    pub fn unit_index(&self, m: usize, i: usize) -> usize {
        m * self.n_vars + i
    }

    pub fn layout(&self) -> UnitLayout {
        UnitLayout {
            width: self.width,
            n_blocks: self.n_blocks,
        }
    }

    /// Positive weights over all units.
    pub fn weight_count(&self) -> usize {
        self.n_units() * self.layout().weight_count()
    }

    pub fn bias_count(&self) -> usize {
        self.n_units() * self.layout().bias_count()
    }

    pub fn logit_count(&self) -> usize {
        match self.coupling {
            CouplingMode::Mixture => self.n_components,
            CouplingMode::PaperLiteral => 0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.bias_count() + self.logit_count()
    }
}

/// Offsets of each tensor inside one unit's flat weight and bias vectors.
///
/// Weights: `[input (W) | block 0: w1 (W·W), w2 (W·W) | … | output (W)]`.
/// Biases:  `[input (W) | block 0: b1 (W), b2 (W) | … | output (1)]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnitLayout {
    pub width: usize,
    pub n_blocks: usize,
}

impl UnitLayout {
    pub fn weight_count(&self) -> usize {
        let w = self.width;
        w + self.n_blocks * LAYERS_PER_BLOCK * w * w + w
    }

    pub fn bias_count(&self) -> usize {
        let w = self.width;
        w + self.n_blocks * LAYERS_PER_BLOCK * w + 1
    }

    pub fn block_weight_offset(&self, block: usize, layer: usize) -> usize {
        let w = self.width;
        w + (block * LAYERS_PER_BLOCK + layer) * w * w
    }

    pub fn block_bias_offset(&self, block: usize, layer: usize) -> usize {
        let w = self.width;
        w + (block * LAYERS_PER_BLOCK + layer) * w
    }

    pub fn output_weight_offset(&self) -> usize {
        self.weight_count() - self.width
    }

    pub fn output_bias_offset(&self) -> usize {
        self.bias_count() - 1
    }
}

/// Fixed affine map from raw margins to the units' input coordinates,
/// `z = (x - loc) / scale`. Identity by default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginScale {
    pub loc: Vec<f64>,
    pub scale: Vec<f64>,
}

impl MarginScale {
    pub fn identity(n: usize) -> Self {
        MarginScale {
            loc: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }

    /// Per-variable mean and standard deviation of `targets`.
    pub fn fit(targets: &[Vec<f64>]) -> Result<Self> {
        let n = targets
            .first()
            .ok_or_else(|| Error::invalid("no targets to fit margin scale"))?
            .len();
        let count = targets.len() as f64;
        let mut loc = vec![0.0; n];
        for t in targets {
            for (l, v) in loc.iter_mut().zip(t) {
                *l += v / count;
            }
        }
        let mut scale = vec![0.0; n];
        for t in targets {
            for ((s, v), l) in scale.iter_mut().zip(t).zip(&loc) {
                *s += (v - l) * (v - l) / count;
            }
        }
        let scale = scale
            .into_iter()
            .map(|v| if v > 0.0 { v.sqrt() } else { 1.0 })
            .collect();
        Ok(MarginScale { loc, scale })
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.loc.len() != n || self.scale.len() != n {
            return Err(Error::invalid(format!(
                "margin scale has {} / {} entries, expected {n}",
                self.loc.len(),
                self.scale.len()
            )));
        }
        if self.scale.iter().any(|s| !(*s > 0.0 && s.is_finite()))
            || self.loc.iter().any(|l| !l.is_finite())
        {
            return Err(Error::invalid("margin scale must be finite and positive"));
        }
        Ok(())
    }

    pub fn to_unit(&self, i: usize, x: f64) -> f64 {
        (x - self.loc[i]) / self.scale[i]
    }

    pub fn from_unit(&self, i: usize, z: f64) -> f64 {
        self.loc[i] + self.scale[i] * z
    }

    /// `Σ ln scaleᵢ`, the log-Jacobian subtracted from unit-space densities.
    pub fn log_jacobian(&self) -> f64 {
        self.scale.iter().map(|s| s.ln()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_follow_layout() {
        let a = JdanArch::new(3, 2, 4, 64, CouplingMode::Mixture).unwrap();
        let l = a.layout();
        assert_eq!(l.weight_count(), 64 + 4 * 2 * 64 * 64 + 64);
        assert_eq!(l.bias_count(), 64 + 4 * 2 * 64 + 1);
        assert_eq!(a.weight_count(), 6 * l.weight_count());
        assert_eq!(a.logit_count(), 2);
        assert_eq!(l.output_weight_offset(), l.block_weight_offset(4, 0));
    }

    #[test]
    fn paper_literal_forces_single_component() {
        assert!(JdanArch::new(2, 2, 1, 4, CouplingMode::PaperLiteral).is_err());
        let a = JdanArch::new(2, 1, 1, 4, CouplingMode::PaperLiteral).unwrap();
        assert_eq!(a.logit_count(), 0);
        assert!(JdanArch::new(0, 1, 1, 4, CouplingMode::Mixture).is_err());
    }

    #[test]
    fn margin_scale_fit() {
        let s = MarginScale::fit(&[vec![1.0, 5.0], vec![3.0, 5.0]]).unwrap();
        assert_eq!(s.loc, vec![2.0, 5.0]);
        assert_eq!(s.scale, vec![1.0, 1.0]);
        assert_eq!(s.to_unit(0, 3.0), 1.0);
    }
}
