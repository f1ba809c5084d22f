//! Forecast products: conditional quantiles, Monte-Carlo sampling and the
//! security index Ω, the probability that every margin clears its threshold.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Open01;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jdan::ForecastDistribution;
use crate::numeric;
use crate::par;

/// Bisection tolerance on the conditional CDF.
pub const QUANTILE_TOL: f64 = 1e-8;
pub const QUANTILE_BRACKET: (f64, f64) = (-1.0, 2.0);
/// Largest dimension for the 2^N corner expansion.
pub const MAX_OMEGA_VARS: usize = 20;
/// Ω may leave [0, 1] by this much before it is treated as an error.
pub const OMEGA_SLACK: f64 = 1e-9;
/// Samples drawn from one RNG stream.
const SAMPLE_CHUNK: usize = 1024;

/// Root of `conditional_cdf(i, ·) = alpha` given the other entries of `sm`.
pub fn quantile(dist: &ForecastDistribution, i: usize, sm: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha {alpha} outside (0,1)")));
    }
    let mut x = sm.to_vec();
    numeric::bisect(
        |v| {
            x[i] = v;
            dist.conditional_cdf(i, &x)
        },
        alpha,
        QUANTILE_BRACKET.0,
        QUANTILE_BRACKET.1,
        QUANTILE_TOL,
    )
}

fn chunk_seed(seed: u64, chunk: usize) -> u64 {
    let mut z = seed ^ (chunk as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 27)
}

/// `n` draws by component selection and per-coordinate inverse transform.
/// Each block of draws has its own seeded stream, so the result does not
/// depend on the thread count.
pub fn sample(dist: &ForecastDistribution, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let chunks = n.div_ceil(SAMPLE_CHUNK);
    let parts = par::map_range(chunks, |c| -> Result<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(chunk_seed(seed, c));
        let len = SAMPLE_CHUNK.min(n - c * SAMPLE_CHUNK);
        let pi = dist.mixture_weights();
        (0..len)
            .map(|_| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut m = pi.len() - 1;
                for (k, p) in pi.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        m = k;
                        break;
                    }
                }
                (0..dist.n_vars())
                    .map(|i| dist.unit_quantile(m, i, rng.sample(Open01)))
                    .collect()
            })
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Per-flowgate thresholds γᵢ; the secure set is `SMᵢ ≥ 1 − γᵢ` for all i.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SecurityThresholds {
    pub gamma: Vec<f64>,
}

impl SecurityThresholds {
    pub fn new(gamma: Vec<f64>) -> Result<Self> {
        if gamma.is_empty() || gamma.iter().any(|g| !(*g > 0.0)) {
            return Err(Error::invalid("thresholds must be positive"));
        }
        Ok(SecurityThresholds { gamma })
    }

    pub fn lower_bounds(&self) -> Vec<f64> {
        self.gamma.iter().map(|g| 1.0 - g).collect()
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }
}

impl Default for SecurityThresholds {
    fn default() -> Self {
        SecurityThresholds {
            gamma: vec![0.7, 0.65, 0.6],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corner {
    /// Lower bound per coordinate, `None` for +∞.
    pub point: Vec<Option<f64>>,
    /// `(−1)^(number of lower-bound coordinates)`.
    pub sign: i8,
    pub cdf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaResult {
    pub omega: f64,
    pub corners: Vec<Corner>,
    pub wall_time_s: f64,
}

/// Probability of the secure box by inclusion-exclusion over the 2^N
/// corners built from `{1 − γᵢ, +∞}`.
pub fn omega(dist: &ForecastDistribution, thresholds: &SecurityThresholds) -> Result<OmegaResult> {
    let start = Instant::now();
    let n = dist.n_vars();
    if thresholds.len() != n {
        return Err(Error::invalid(format!(
            "{} thresholds for {n} flowgates",
            thresholds.len()
        )));
    }
    if n > MAX_OMEGA_VARS {
        return Err(Error::invalid(format!(
            "Ω needs N <= {MAX_OMEGA_VARS}, got {n}"
        )));
    }
    let lb = thresholds.lower_bounds();
    let eval = |mask: usize| -> Result<Corner> {
        let point: Vec<Option<f64>> = (0..n)
            .map(|i| (mask >> i & 1 == 1).then_some(lb[i]))
            .collect();
        let x: Vec<f64> = point.iter().map(|p| p.unwrap_or(f64::INFINITY)).collect();
        let sign = if mask.count_ones().is_multiple_of(2) { 1 } else { -1 };
        Ok(Corner {
            point,
            sign,
            cdf: dist.joint_cdf(&x)?,
        })
    };
    let count = 1usize << n;
    let corners = if count > 64 {
        par::map_range(count, eval)
            .into_iter()
            .collect::<Result<Vec<_>>>()?
    } else {
        (0..count).map(eval).collect::<Result<Vec<_>>>()?
    };
    let raw: f64 = corners.iter().map(|c| c.sign as f64 * c.cdf).sum();
    if !(-OMEGA_SLACK..=1.0 + OMEGA_SLACK).contains(&raw) {
        return Err(Error::Numeric(format!("Ω = {raw} outside [0, 1]")));
    }
    Ok(OmegaResult {
        omega: raw.clamp(0.0, 1.0),
        corners,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Percentage of `n` sampled scenarios inside the secure box.
pub fn secure_scenario_proportion(
    dist: &ForecastDistribution,
    thresholds: &SecurityThresholds,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if thresholds.len() != dist.n_vars() || n == 0 {
        return Err(Error::invalid(
            "threshold count must match N and n must be positive",
        ));
    }
    let lb = thresholds.lower_bounds();
    let draws = sample(dist, n, seed)?;
    let secure = draws
        .iter()
        .filter(|x| x.iter().zip(&lb).all(|(v, b)| v >= b))
        .count();
    Ok(100.0 * secure as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloCheck {
    pub samples: usize,
    pub seed: u64,
    /// Percentage.
    pub proportion: f64,
    /// `|Ω − proportion/100|`.
    pub abs_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaReport {
    pub thresholds: SecurityThresholds,
    pub lower_bounds: Vec<f64>,
    pub omega: f64,
    pub corners: Vec<Corner>,
    pub wall_time_s: f64,
    pub monte_carlo: Option<MonteCarloCheck>,
}

/// Ω with an optional Monte-Carlo cross-check.
pub fn omega_report(
    dist: &ForecastDistribution,
    thresholds: &SecurityThresholds,
    mc: Option<(usize, u64)>,
) -> Result<OmegaReport> {
    let r = omega(dist, thresholds)?;
    let monte_carlo = match mc {
        Some((samples, seed)) => {
            let p = secure_scenario_proportion(dist, thresholds, samples, seed)?;
            Some(MonteCarloCheck {
                samples,
                seed,
                proportion: p,
                abs_diff: (r.omega - p / 100.0).abs(),
            })
        }
        None => None,
    };
    Ok(OmegaReport {
        thresholds: thresholds.clone(),
        lower_bounds: thresholds.lower_bounds(),
        omega: r.omega,
        corners: r.corners,
        wall_time_s: r.wall_time_s,
        monte_carlo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jdan::{CouplingMode, JdanArch, JdanParams, MarginScale, RandomInit};

    fn dist(n: usize, m: usize, seed: u64) -> ForecastDistribution {
        let mode = if m == 1 {
            CouplingMode::PaperLiteral
        } else {
            CouplingMode::Mixture
        };
        let arch = JdanArch::new(n, m, 1, 4, mode).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = JdanParams::random(&arch, &RandomInit::default(), &mut rng).unwrap();
        ForecastDistribution::new(p, MarginScale::identity(n)).unwrap()
    }

    #[test]
    fn one_dimensional_omega() {
        let d = dist(1, 2, 1);
        let t = SecurityThresholds::new(vec![0.4]).unwrap();
        let r = omega(&d, &t).unwrap();
        assert_eq!(r.corners.len(), 2);
        let want = 1.0 - d.joint_cdf(&[0.6]).unwrap();
        assert!((r.omega - want).abs() < 1e-15);
    }

    #[test]
    fn two_dimensional_expansion() {
        let d = dist(2, 3, 2);
        let t = SecurityThresholds::new(vec![0.5, 0.45]).unwrap();
        let f = |x: f64, y: f64| d.joint_cdf(&[x, y]).unwrap();
        let inf = f64::INFINITY;
        let want = f(inf, inf) - f(0.5, inf) - f(inf, 0.55) + f(0.5, 0.55);
        assert!((omega(&d, &t).unwrap().omega - want).abs() < 1e-15);
    }

    #[test]
    fn huge_gamma_gives_full_mass() {
        let d = dist(3, 2, 3);
        let t = SecurityThresholds::new(vec![1e9; 3]).unwrap();
        assert!((omega(&d, &t).unwrap().omega - 1.0).abs() < 1e-8);
        assert!(omega(&d, &SecurityThresholds::new(vec![0.5; 2]).unwrap()).is_err());
    }

    #[test]
    fn impossible_thresholds_give_zero_proportion() {
        let d = dist(2, 2, 4);
        let t = SecurityThresholds {
            gamma: vec![-1e9, 0.5],
        };
        assert_eq!(secure_scenario_proportion(&d, &t, 200, 1).unwrap(), 0.0);
    }

    #[test]
    fn sampling_is_seeded() {
        let d = dist(2, 2, 5);
        let a = sample(&d, 2100, 9).unwrap();
        assert_eq!(a, sample(&d, 2100, 9).unwrap());
        assert_ne!(a, sample(&d, 2100, 10).unwrap());
        assert_eq!(a.len(), 2100);
    }

    #[test]
    fn quantile_round_trip() {
        let d = dist(2, 3, 6);
        let sm = [0.0, 0.5];
        for a in [0.01, 0.3, 0.5, 0.99] {
            let q = quantile(&d, 0, &sm, a).unwrap();
            assert!((d.conditional_cdf(0, &[q, 0.5]).unwrap() - a).abs() < 1e-6);
        }
    }
}
