//! Multivariate kernel density baseline with a product Gaussian kernel.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::reliability::ConditionalForecaster;
use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MkdeModel {
    pub points: Vec<Vec<f64>>,
    pub bandwidth: Vec<f64>,
}

fn std_normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

impl MkdeModel {
    /// Scott's rule: `hᵢ = σᵢ n^{−1/(N+4)}`.
    pub fn fit(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::invalid("MKDE needs at least 2 training vectors"));
        }
        let n = points[0].len();
        let count = points.len() as f64;
        let factor = count.powf(-1.0 / (n as f64 + 4.0));
        let bandwidth = (0..n)
            .map(|i| {
                let mean = points.iter().map(|p| p[i]).sum::<f64>() / count;
                let var = points.iter().map(|p| (p[i] - mean).powi(2)).sum::<f64>() / (count - 1.0);
                if !(var > 0.0) {
                    return Err(Error::invalid(format!(
                        "zero variance in dimension {}",
                        i + 1
                    )));
                }
                Ok(var.sqrt() * factor)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::with_bandwidth(points, bandwidth)
    }

    pub fn with_bandwidth(points: Vec<Vec<f64>>, bandwidth: Vec<f64>) -> Result<Self> {
        let n = bandwidth.len();
        if points.is_empty() || points.iter().any(|p| p.len() != n) {
            return Err(Error::invalid(
                "MKDE points must be non-empty with one bandwidth per dimension",
            ));
        }
        if bandwidth.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
            return Err(Error::invalid("MKDE bandwidths must be positive"));
        }
        Ok(MkdeModel { points, bandwidth })
    }

    pub fn n_vars(&self) -> usize {
        self.bandwidth.len()
    }

    fn log_kernel(&self, p: &[f64], x: &[f64], skip: Option<usize>) -> f64 {
        let mut acc = 0.0;
        for (i, (&h, (&c, &v))) in self.bandwidth.iter().zip(p.iter().zip(x)).enumerate() {
            if Some(i) == skip {
                continue;
            }
            let z = (v - c) / h;
            acc -= 0.5 * z * z + LN_SQRT_2PI + h.ln();
        }
        acc
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        let s: f64 = self
            .points
            .iter()
            .map(|p| self.log_kernel(p, x, None).exp())
            .sum();
        s / self.points.len() as f64
    }

    /// `P(Xᵢ ≤ xᵢ | X₋ᵢ = x₋ᵢ)`: the mixture conditioned on the other
    /// coordinates is again a Gaussian mixture, with weights proportional
    /// to each kernel's density at `x₋ᵢ`.
    pub fn conditional_cdf(&self, i: usize, x: &[f64]) -> Result<f64> {
        if i >= self.n_vars() || x.len() != self.n_vars() {
            return Err(Error::invalid(
                "conditional index or point dimension out of range",
            ));
        }
        let logs: Vec<f64> = self
            .points
            .iter()
            .map(|p| self.log_kernel(p, x, Some(i)))
            .collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            return Err(Error::DensityBelowFloor { density: 0.0 });
        }
        let h = self.bandwidth[i];
        let (mut num, mut den) = (0.0, 0.0);
        for (p, l) in self.points.iter().zip(&logs) {
            let w = (l - top).exp();
            den += w;
            num += w * std_normal_cdf((x[i] - p[i]) / h);
        }
        Ok((num / den).clamp(0.0, 1.0))
    }
}

/// The MKDE model scored against `len` test samples; the model itself
/// does not depend on the sample.
pub struct MkdeForecaster<'a> {
    pub model: &'a MkdeModel,
    pub len: usize,
}

impl ConditionalForecaster for MkdeForecaster<'_> {
    fn n_samples(&self) -> usize {
        self.len
    }

    fn conditional_cdf(&self, _: usize, i: usize, sm: &[f64]) -> Result<f64> {
        self.model.conditional_cdf(i, sm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_points_give_gaussian_conditional() {
        let m = MkdeModel::with_bandwidth(vec![vec![0.4, 0.2]; 5], vec![0.1, 0.3]).unwrap();
        for x in [0.1, 0.4, 0.55] {
            let got = m.conditional_cdf(0, &[x, 0.9]).unwrap();
            assert!((got - std_normal_cdf((x - 0.4) / 0.1)).abs() < 1e-14);
        }
    }

    #[test]
    fn density_integrates_to_one() {
        let pts = vec![
            vec![0.1, 0.3],
            vec![0.4, 0.35],
            vec![0.6, 0.8],
            vec![0.2, 0.5],
        ];
        let m = MkdeModel::fit(pts).unwrap();
        let (lo, hi, k) = (-2.0, 3.0, 400);
        let d = (hi - lo) / k as f64;
        let mut s = 0.0;
        for a in 0..k {
            for b in 0..k {
                let x = [lo + (a as f64 + 0.5) * d, lo + (b as f64 + 0.5) * d];
                s += m.density(&x) * d * d;
            }
        }
        assert!((s - 1.0).abs() < 0.01, "{s}");
    }

    #[test]
    fn conditional_matches_quadrature() {
        let pts = vec![vec![0.1, 0.3], vec![0.4, 0.35], vec![0.6, 0.8]];
        let m = MkdeModel::with_bandwidth(pts, vec![0.15, 0.2]).unwrap();
        let y = 0.5;
        let k = 20000;
        let (lo, x) = (-3.0, 0.45);
        let d = (x - lo) / k as f64;
        let num: f64 = (0..k)
            .map(|a| m.density(&[lo + (a as f64 + 0.5) * d, y]) * d)
            .sum();
        let dt = 8.0 / k as f64;
        let den: f64 = (0..k)
            .map(|a| m.density(&[-3.5 + (a as f64 + 0.5) * dt, y]) * dt)
            .sum();
        assert!((m.conditional_cdf(0, &[x, y]).unwrap() - num / den).abs() < 1e-4);
    }

    #[test]
    fn monotone_and_rejects_constant_dimension() {
        let pts: Vec<Vec<f64>> = (0..30)
            .map(|k| vec![(k as f64 * 0.37).sin(), (k as f64).cos()])
            .collect();
        let m = MkdeModel::fit(pts).unwrap();
        let mut prev = 0.0;
        for k in 0..200 {
            let c = m
                .conditional_cdf(1, &[0.2, -2.0 + k as f64 * 0.02])
                .unwrap();
            assert!(c >= prev);
            prev = c;
        }
        assert!(MkdeModel::fit(vec![vec![1.0, 0.0], vec![1.0, 2.0]]).is_err());
    }
}
