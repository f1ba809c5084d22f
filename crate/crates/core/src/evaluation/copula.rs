//! Archimedean copula baselines: Clayton and Frank, any dimension.
//!
//! Both are written as `C(u) = ψ(Σ φ(uᵢ))`. The conditional CDF of one
//! coordinate given the rest is the ratio of `(N−1)`-th generator
//! derivatives, `ψ^(N−1)(s) / ψ^(N−1)(s₋ᵢ)`.

use serde::{Deserialize, Serialize};

use super::reliability::ConditionalForecaster;
use crate::error::{Error, Result};
use crate::jdan::ForecastDistribution;

/// Conditioning probabilities are kept at least this far from 0.
pub const U_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CopulaFamily {
    Clayton,
    Frank,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CopulaSpec {
    pub family: CopulaFamily,
    pub theta: f64,
}

impl CopulaSpec {
    pub fn new(family: CopulaFamily, theta: f64, n: usize) -> Result<Self> {
        let s = CopulaSpec { family, theta };
        s.validate(n)?;
        Ok(s)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let t = self.theta;
        if n == 0 || !t.is_finite() {
            return Err(Error::invalid("copula needs N >= 1 and finite θ"));
        }
        let ok = match self.family {
            CopulaFamily::Clayton => t > 0.0,
            CopulaFamily::Frank if n >= 3 => t > 0.0,
            CopulaFamily::Frank => t != 0.0,
        };
        if !ok {
            return Err(Error::invalid(format!(
                "invalid θ = {t} for {:?} with N = {n}",
                self.family
            )));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let f = match self.family {
            CopulaFamily::Clayton => "clayton",
            CopulaFamily::Frank => "frank",
        };
        format!("{f}(θ={})", self.theta)
    }

    /// Generator φ(u), with φ(0) = ∞ and φ(1) = 0.
    pub fn phi(&self, u: f64) -> f64 {
        let t = self.theta;
        match self.family {
            CopulaFamily::Clayton => (u.powf(-t) - 1.0) / t,
            CopulaFamily::Frank => -((-t * u).exp_m1() / (-t).exp_m1()).ln(),
        }
    }

    /// Inverse generator ψ(s).
    pub fn psi(&self, s: f64) -> f64 {
        let t = self.theta;
        match self.family {
            CopulaFamily::Clayton => (1.0 + t * s).powf(-1.0 / t),
            CopulaFamily::Frank => -((-t).exp_m1() * (-s).exp()).ln_1p() / t,
        }
    }

    /// `ψ^(k)(s) / ψ^(k)(s0)`.
    fn derivative_ratio(&self, k: usize, s: f64, s0: f64) -> f64 {
        let t = self.theta;
        match self.family {
            CopulaFamily::Clayton => ((1.0 + t * s) / (1.0 + t * s0)).powf(-1.0 / t - k as f64),
            CopulaFamily::Frank => {
                // ψ^(k)(s) = (−1)^k Li_{1−k}(w) / θ with w = (1 − e^{−θ}) e^{−s}.
                let c = -(-t).exp_m1();
                let w = c * (-s).exp();
                let w0 = c * (-s0).exp();
                polylog_nonpositive(k - 1, w) / polylog_nonpositive(k - 1, w0)
            }
        }
    }
}

/// Eulerian numbers `A(m, j)`, j = 0..m.
fn eulerian(m: usize) -> Vec<f64> {
    let mut row = vec![1.0];
    for n in 1..=m {
        let mut next = vec![0.0; n];
        for j in 0..n {
            let a = if j < row.len() {
                (j + 1) as f64 * row[j]
            } else {
                0.0
            };
            let b = if j >= 1 && j - 1 < row.len() {
                (n - j) as f64 * row[j - 1]
            } else {
                0.0
            };
            next[j] = a + b;
        }
        row = next;
    }
    row
}

/// `Li_{−m}(w) = w Σⱼ A(m, j) wʲ / (1 − w)^{m+1}` for `w < 1`.
pub fn polylog_nonpositive(m: usize, w: f64) -> f64 {
    if m == 0 {
        return w / (1.0 - w);
    }
    let poly: f64 = eulerian(m).iter().rev().fold(0.0, |acc, a| acc * w + a);
    w * poly / (1.0 - w).powi(m as i32 + 1)
}

fn check_unit(u: &[f64]) -> Result<()> {
    if u.is_empty() || u.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("copula arguments must lie in [0, 1]"));
    }
    Ok(())
}

/// `C(u)`.
pub fn copula_cdf(u: &[f64], spec: &CopulaSpec) -> Result<f64> {
    check_unit(u)?;
    spec.validate(u.len())?;
    if u.contains(&0.0) {
        return Ok(0.0);
    }
    let s: f64 = u.iter().map(|&v| spec.phi(v)).sum();
    Ok(spec.psi(s).clamp(0.0, 1.0))
}

/// `P(Uᵢ ≤ uᵢ | U₋ᵢ = u₋ᵢ)`.
pub fn copula_conditional_cdf(i: usize, u: &[f64], spec: &CopulaSpec) -> Result<f64> {
    check_unit(u)?;
    spec.validate(u.len())?;
    if i >= u.len() {
        return Err(Error::invalid("conditional index out of range"));
    }
    if u.len() == 1 {
        return Ok(u[0]);
    }
    if u[i] == 0.0 {
        return Ok(0.0);
    }
    let rest: f64 = u
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != i)
        .map(|(_, &v)| spec.phi(v.max(U_FLOOR)))
        .sum();
    let s = rest + spec.phi(u[i]);
    let r = spec.derivative_ratio(u.len() - 1, s, rest);
    if !r.is_finite() {
        return Err(Error::NonFinite("copula conditional"));
    }
    Ok(r.clamp(0.0, 1.0))
}

/// A copula over per-sample univariate forecasts.
pub struct CopulaForecaster<'a> {
    pub spec: CopulaSpec,
    /// `marginals[i][k]`: N=1 forecast of margin `i` for test sample `k`.
    pub marginals: &'a [Vec<ForecastDistribution>],
}

impl CopulaForecaster<'_> {
    pub fn probabilities(&self, k: usize, sm: &[f64]) -> Vec<f64> {
        self.marginals
            .iter()
            .zip(sm)
            .map(|(m, &x)| m[k].marginal(0, x).0.clamp(0.0, 1.0))
            .collect()
    }
}

impl ConditionalForecaster for CopulaForecaster<'_> {
    fn n_samples(&self) -> usize {
        self.marginals.first().map_or(0, Vec::len)
    }

    fn conditional_cdf(&self, k: usize, i: usize, sm: &[f64]) -> Result<f64> {
        copula_conditional_cdf(i, &self.probabilities(k, sm), &self.spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clayton(t: f64) -> CopulaSpec {
        CopulaSpec {
            family: CopulaFamily::Clayton,
            theta: t,
        }
    }

    fn frank(t: f64) -> CopulaSpec {
        CopulaSpec {
            family: CopulaFamily::Frank,
            theta: t,
        }
    }

    #[test]
    fn clayton_generator_arithmetic() {
        assert!((copula_cdf(&[0.5, 0.5], &clayton(1.0)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn frank_matches_bivariate_closed_form() {
        for t in [-2.0f64, 0.5, 1.5, 7.0] {
            for (u, v) in [(0.2, 0.7), (0.5, 0.5), (0.9, 0.05)] {
                let closed = -(1.0
                    + ((-t * u).exp() - 1.0) * ((-t * v).exp() - 1.0) / ((-t).exp() - 1.0))
                    .ln()
                    / t;
                let got = copula_cdf(&[u, v], &frank(t)).unwrap();
                assert!(
                    (got - closed).abs() < 1e-13,
                    "{t} {u} {v}: {got} vs {closed}"
                );
            }
        }
    }

    #[test]
    fn boundaries() {
        for s in [clayton(0.5), clayton(1.5), frank(1.0)] {
            assert!((copula_cdf(&[1.0; 3], &s).unwrap() - 1.0).abs() < 1e-12);
            assert_eq!(copula_cdf(&[0.3, 0.0, 0.8], &s).unwrap(), 0.0);
            assert!((copula_cdf(&[0.37, 1.0, 1.0], &s).unwrap() - 0.37).abs() < 1e-9);
        }
        assert!(copula_cdf(&[1.2, 0.5], &clayton(1.0)).is_err());
        assert!(CopulaSpec::new(CopulaFamily::Clayton, 0.0, 2).is_err());
        assert!(CopulaSpec::new(CopulaFamily::Frank, -1.0, 3).is_err());
        assert!(CopulaSpec::new(CopulaFamily::Frank, -1.0, 2).is_ok());
    }

    #[test]
    fn eulerian_rows() {
        assert_eq!(eulerian(1), vec![1.0]);
        assert_eq!(eulerian(2), vec![1.0, 1.0]);
        assert_eq!(eulerian(3), vec![1.0, 4.0, 1.0]);
        assert_eq!(eulerian(4), vec![1.0, 11.0, 11.0, 1.0]);
        // Li_{-1}(w) = w / (1 − w)^2
        assert!((polylog_nonpositive(1, 0.3) - 0.3 / 0.49).abs() < 1e-15);
    }

    /// Conditional CDF against a finite difference of C in the conditioning
    /// coordinates: ∂_{−i} C(u) / ∂_{−i} C(1, u_{−i}).
    #[test]
    fn conditional_matches_finite_difference() {
        let h = 1e-4;
        for s in [clayton(0.5), clayton(1.5), frank(1.0), frank(4.0)] {
            let u = [0.35, 0.6, 0.45];
            let i = 0;
            let mixed = |x: f64| {
                let mut acc = 0.0;
                for (sj, dj) in [(1.0, h), (-1.0, -h)] {
                    for (sk, dk) in [(1.0, h), (-1.0, -h)] {
                        acc += sj * sk * copula_cdf(&[x, u[1] + dj, u[2] + dk], &s).unwrap();
                    }
                }
                acc
            };
            let want = mixed(u[0]) / mixed(1.0);
            let got = copula_conditional_cdf(i, &u, &s).unwrap();
            assert!((got - want).abs() < 1e-5, "{s:?}: {got} vs {want}");
        }
        let s2 = frank(-2.0);
        let want = (copula_cdf(&[0.4, 0.5 + h], &s2).unwrap()
            - copula_cdf(&[0.4, 0.5 - h], &s2).unwrap())
            / (2.0 * h);
        assert!((copula_conditional_cdf(0, &[0.4, 0.5], &s2).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn conditional_is_monotone_and_bounded() {
        let s = frank(1.5);
        let mut prev = 0.0;
        for k in 0..=100 {
            let c = copula_conditional_cdf(1, &[0.3, k as f64 / 100.0], &s).unwrap();
            assert!(c >= prev && c <= 1.0);
            prev = c;
        }
        assert!((prev - 1.0).abs() < 1e-12);
    }
}
