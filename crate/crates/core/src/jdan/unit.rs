//! Single-input monotone unit: sigmoid hidden layers with positive weights,
//! residual blocks between equal-width hidden layers, linear output.

use super::arch::UnitLayout;
use crate::autodiff::sigmoid;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    PosInf,
    NegInf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonotoneUnit {
    /// `None` for the degenerate linear unit `w·x + b`.
    layout: Option<UnitLayout>,
    weights: Vec<f64>,
    biases: Vec<f64>,
}

fn check_weights(w: &[f64]) -> Result<()> {
    match w.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        Some(&value) => Err(Error::NonPositiveWeight { value }),
        None => Ok(()),
    }
}

fn check_biases(b: &[f64]) -> Result<()> {
    if b.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("unit bias"))
    }
}

impl MonotoneUnit {
    pub fn from_flat(layout: UnitLayout, weights: Vec<f64>, biases: Vec<f64>) -> Result<Self> {
        if layout.width == 0
            || weights.len() != layout.weight_count()
            || biases.len() != layout.bias_count()
        {
            return Err(Error::shape(
                "unit",
                format!(
                    "layout {layout:?} needs {}/{} params, got {}/{}",
                    layout.weight_count(),
                    layout.bias_count(),
                    weights.len(),
                    biases.len()
                ),
            ));
        }
        check_weights(&weights)?;
        check_biases(&biases)?;
        Ok(MonotoneUnit {
            layout: Some(layout),
            weights,
            biases,
        })
    }

    /// Zero-hidden-layer unit.
    pub fn linear(weight: f64, bias: f64) -> Result<Self> {
        check_weights(&[weight])?;
        check_biases(&[bias])?;
        Ok(MonotoneUnit {
            layout: None,
            weights: vec![weight],
            biases: vec![bias],
        })
    }

    pub fn layout(&self) -> Option<UnitLayout> {
        self.layout
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self.layout {
            None => self.weights[0] * x + self.biases[0],
            Some(l) => {
                let w = l.width;
                let mut h: Vec<f64> = (0..w)
                    .map(|j| sigmoid(self.weights[j] * x + self.biases[j]))
                    .collect();
                self.run_blocks(l, &mut h, None);
                self.output(l, &h)
            }
        }
    }

    /// Value and derivative with respect to the input.
    pub fn eval_with_slope(&self, x: f64) -> (f64, f64) {
        match self.layout {
            None => (self.weights[0] * x + self.biases[0], self.weights[0]),
            Some(l) => {
                let w = l.width;
                let mut h = vec![0.0; w];
                let mut dh = vec![0.0; w];
                for j in 0..w {
                    let s = sigmoid(self.weights[j] * x + self.biases[j]);
                    h[j] = s;
                    dh[j] = s * (1.0 - s) * self.weights[j];
                }
                self.run_blocks(l, &mut h, Some(&mut dh));
                (self.output(l, &h), self.output_linear(l, &dh))
            }
        }
    }

    /// Analytic limit at ±∞: the first hidden layer saturates to 1 or 0
    /// because its weights are positive; the rest runs deterministically.
    pub fn limit(&self, dir: Direction) -> f64 {
        match self.layout {
            None => match dir {
                Direction::PosInf => f64::INFINITY,
                Direction::NegInf => f64::NEG_INFINITY,
            },
            Some(l) => {
                let sat = match dir {
                    Direction::PosInf => 1.0,
                    Direction::NegInf => 0.0,
                };
                let mut h = vec![sat; l.width];
                self.run_blocks(l, &mut h, None);
                self.output(l, &h)
            }
        }
    }

    fn run_blocks(&self, l: UnitLayout, h: &mut [f64], mut dh: Option<&mut Vec<f64>>) {
        let w = l.width;
        let mut a = vec![0.0; w];
        let mut g = vec![0.0; w];
        let mut da = vec![0.0; w];
        let mut dg = vec![0.0; w];
        for blk in 0..l.n_blocks {
            let w1 = &self.weights[l.block_weight_offset(blk, 0)..][..w * w];
            let b1 = &self.biases[l.block_bias_offset(blk, 0)..][..w];
            let w2 = &self.weights[l.block_weight_offset(blk, 1)..][..w * w];
            let b2 = &self.biases[l.block_bias_offset(blk, 1)..][..w];
            affine_sigmoid(w1, b1, h, &mut a);
            affine_sigmoid(w2, b2, &a, &mut g);
            if let Some(dh) = dh.as_deref_mut() {
                tangent(w1, &a, dh, &mut da);
                tangent(w2, &g, &da, &mut dg);
                for (d, t) in dh.iter_mut().zip(&dg) {
                    *d += t;
                }
            }
            for (hv, gv) in h.iter_mut().zip(&g) {
                *hv += gv;
            }
        }
    }

    fn output(&self, l: UnitLayout, h: &[f64]) -> f64 {
        self.output_linear(l, h) + self.biases[l.output_bias_offset()]
    }

    fn output_linear(&self, l: UnitLayout, h: &[f64]) -> f64 {
        let wo = &self.weights[l.output_weight_offset()..][..l.width];
        wo.iter().zip(h).map(|(a, b)| a * b).sum()
    }
}

fn affine_sigmoid(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * n..(r + 1) * n];
        let z: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[r];
        *o = sigmoid(z);
    }
}

/// `out = s ⊙ (1 - s) ⊙ (W · dx)` where `s` is the layer's sigmoid output.
fn tangent(w: &[f64], s: &[f64], dx: &[f64], out: &mut [f64]) {
    let n = dx.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * n..(r + 1) * n];
        let z: f64 = row.iter().zip(dx).map(|(a, b)| a * b).sum();
        *o = s[r] * (1.0 - s[r]) * z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_unit() {
        let u = MonotoneUnit::linear(2.0, 1.0).unwrap();
        assert_eq!(u.eval(3.0), 7.0);
        assert_eq!(u.limit(Direction::PosInf), f64::INFINITY);
        assert!(MonotoneUnit::linear(0.0, 1.0).is_err());
    }

    #[test]
    fn one_hidden_sigmoid_limits() {
        let l = UnitLayout {
            width: 1,
            n_blocks: 0,
        };
        let u = MonotoneUnit::from_flat(l, vec![1.0, 3.0], vec![0.0, 1.0]).unwrap();
        assert_eq!(u.limit(Direction::PosInf), 4.0);
        assert_eq!(u.limit(Direction::NegInf), 1.0);
        assert_eq!(u.eval(0.0), 3.0 * 0.5 + 1.0);
    }

    #[test]
    fn rejects_non_positive_weight() {
        let l = UnitLayout {
            width: 1,
            n_blocks: 0,
        };
        let e = MonotoneUnit::from_flat(l, vec![1.0, -3.0], vec![0.0, 1.0]).unwrap_err();
        assert!(matches!(e, Error::NonPositiveWeight { .. }));
        assert!(MonotoneUnit::from_flat(l, vec![1.0], vec![0.0, 1.0]).is_err());
    }
}
