use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BnMode {
    Train,
    Infer,
}

/// Batch normalization over the batch axis of `[B, W]` features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Weight kept on the old running statistics at each update.
    pub momentum: f64,
    /// False until running statistics have been set from data.
    pub initialized: bool,
}

/// Batch mean and biased variance observed in a train-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        BatchNorm {
            scale: Tensor::ones(&[width]),
            shift: Tensor::zeros(&[width]),
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: BN_MOMENTUM,
            initialized: false,
        }
    }

    pub fn width(&self) -> usize {
        self.running_mean.len()
    }

    /// Normalize `x` on the tape. Train mode uses batch statistics and
    /// returns them; infer mode uses the running statistics.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        scale: Var,
        shift: Var,
        mode: BnMode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.width() {
            return Err(Error::shape(
                "batch norm",
                format!("{shape:?} for width {}", self.width()),
            ));
        }
        let b = shape[0];
        match mode {
            BnMode::Train => {
                if b < 2 {
                    return Err(Error::BatchNorm(
                        "train mode needs a batch of at least 2".into(),
                    ));
                }
                let s = g.sum_axis(x, 0)?;
                let mean = g.scale(s, 1.0 / b as f64)?;
                let diff = g.sub(x, mean)?;
                let sq = g.mul(diff, diff)?;
                let s = g.sum_axis(sq, 0)?;
                let var = g.scale(s, 1.0 / b as f64)?;
                let stats = BatchStats {
                    mean: g.value(mean).data().to_vec(),
                    var: g.value(var).data().to_vec(),
                };
                let ve = g.add_scalar(var, BN_EPS)?;
                let sd = g.sqrt(ve)?;
                let inv = g.recip(sd)?;
                let xhat = g.mul(diff, inv)?;
                let y = g.mul(xhat, scale)?;
                Ok((g.add(y, shift)?, Some(stats)))
            }
            BnMode::Infer => {
                if !self.initialized {
                    return Err(Error::BatchNorm(
                        "running statistics are uninitialized".into(),
                    ));
                }
                let mean = g.constant(Tensor::vector(self.running_mean.clone()))?;
                let inv = Tensor::vector(
                    self.running_var
                        .iter()
                        .map(|v| 1.0 / (v + BN_EPS).sqrt())
                        .collect(),
                );
                let inv = g.constant(inv)?;
                let diff = g.sub(x, mean)?;
                let xhat = g.mul(diff, inv)?;
                let y = g.mul(xhat, scale)?;
                Ok((g.add(y, shift)?, None))
            }
        }
    }

    /// Blend batch statistics into the running statistics.
    pub fn update(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, v) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = m * *r + (1.0 - m) * v;
        }
        for (r, v) in self.running_var.iter_mut().zip(&stats.var) {
            *r = m * *r + (1.0 - m) * v;
        }
        self.initialized = true;
    }

    /// Replace the running statistics outright.
    pub fn set_running(&mut self, stats: &BatchStats) {
        self.running_mean.clone_from(&stats.mean);
        self.running_var.clone_from(&stats.var);
        self.initialized = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(
        bn: &BatchNorm,
        rows: &[[f64; 2]],
        mode: BnMode,
    ) -> Result<(Vec<f64>, Option<BatchStats>)> {
        let mut g = Graph::new();
        let data = rows.iter().flatten().copied().collect();
        let x = g.constant(Tensor::new(vec![rows.len(), 2], data).unwrap())?;
        let s = g.constant(bn.scale.clone())?;
        let t = g.constant(bn.shift.clone())?;
        let (y, st) = bn.forward(&mut g, x, s, t, mode)?;
        Ok((g.value(y).data().to_vec(), st))
    }

    #[test]
    fn train_mode_output_statistics() {
        let mut bn = BatchNorm::new(2);
        bn.scale = Tensor::vector(vec![2.0, 0.5]);
        bn.shift = Tensor::vector(vec![-1.0, 3.0]);
        let rows = [[1.0, 4.0], [2.0, -1.0], [7.0, 0.5], [-3.0, 2.0]];
        let (y, _) = run(&bn, &rows, BnMode::Train).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = y.iter().skip(j).step_by(2).copied().collect();
            let mean = col.iter().sum::<f64>() / 4.0;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
            assert!((mean - bn.shift.data()[j]).abs() < 1e-6);
            // eps in the denominator shrinks the spread slightly.
            assert!((sd - bn.scale.data()[j]).abs() < 1e-6 * 10.0);
        }
    }

    #[test]
    fn infer_constant_feature_gives_shift() {
        let mut bn = BatchNorm::new(2);
        bn.shift = Tensor::vector(vec![0.25, -0.5]);
        bn.set_running(&BatchStats {
            mean: vec![3.0, 3.0],
            var: vec![0.0, 2.0],
        });
        let (y, _) = run(&bn, &[[3.0, 3.0]], BnMode::Infer).unwrap();
        assert_eq!(y, vec![0.25, -0.5]);
    }

    #[test]
    fn momentum_one_freezes_running_stats() {
        let mut bn = BatchNorm::new(2);
        bn.momentum = 1.0;
        let (_, st) = run(&bn, &[[1.0, 2.0], [3.0, 5.0]], BnMode::Train).unwrap();
        bn.update(&st.unwrap());
        assert_eq!(bn.running_mean, vec![0.0, 0.0]);
        assert_eq!(bn.running_var, vec![1.0, 1.0]);
    }

    #[test]
    fn errors() {
        let bn = BatchNorm::new(2);
        assert!(matches!(
            run(&bn, &[[1.0, 2.0]], BnMode::Train),
            Err(Error::BatchNorm(_))
        ));
        assert!(matches!(
            run(&bn, &[[1.0, 2.0], [0.0, 1.0]], BnMode::Infer),
            Err(Error::BatchNorm(_))
        ));
    }
}
