//! Synthetic flowgate scenarios with a closed-form forecast oracle.
//!
//! A latent AR(1) state `s` and a two-regime Markov chain `r` drive the
//! margins: `SM_{t+τ} ~ N(mean_r + loading_r · s_t, cov_r)`. The features at
//! time `t` contain `s_t` and `r_t` exactly, so the conditional law of the
//! target given any window ending at `t` is that normal.

use chrono::{Duration, NaiveDateTime};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::series::{FlowgateSeries, TIMESTAMP_FORMAT};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSpec {
    pub mean: Vec<f64>,
    pub loading: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_vars: usize,
    pub ar_coef: f64,
    pub ar_noise: f64,
    /// `[calm, strong]`.
    pub regimes: Vec<RegimeSpec>,
    /// Chance per step that the regime is redrawn.
    pub switch_prob: f64,
    /// Probability of the strong regime when redrawn, ramped linearly from
    /// start to end of the series.
    pub strong_share_start: f64,
    pub strong_share_end: f64,
    /// Std of the noisy latent-state feature.
    pub observation_noise: f64,
    /// Transfer capability per flowgate, MW.
    pub capacities: Vec<f64>,
    pub interval_minutes: u32,
    pub start: String,
    pub lead_steps: usize,
    pub seed: u64,
}

fn equicorrelated(sd: &[f64], rho: f64) -> Vec<Vec<f64>> {
    sd.iter()
        .enumerate()
        .map(|(i, a)| {
            sd.iter()
                .enumerate()
                .map(|(j, b)| if i == j { a * b } else { rho * a * b })
                .collect()
        })
        .collect()
}

impl SynthConfig {
    pub fn with_vars(n: usize) -> Self {
        let idx = |f: &dyn Fn(f64) -> f64| (0..n).map(|i| f(i as f64)).collect::<Vec<f64>>();
        let calm_sd = idx(&|i| 0.06 + 0.01 * i);
        let strong_sd = idx(&|i| 0.10 + 0.01 * i);
        SynthConfig {
            n_vars: n,
            ar_coef: 0.95,
            ar_noise: 0.3,
            regimes: vec![
                RegimeSpec {
                    mean: idx(&|i| 0.55 - 0.05 * i),
                    loading: vec![0.08; n],
                    cov: equicorrelated(&calm_sd, 0.5),
                },
                RegimeSpec {
                    mean: idx(&|i| 0.35 - 0.03 * i),
                    loading: vec![0.12; n],
                    cov: equicorrelated(&strong_sd, 0.75),
                },
            ],
            switch_prob: 0.02,
            strong_share_start: 0.2,
            strong_share_end: 0.8,
            observation_noise: 0.5,
            capacities: idx(&|i| (1000.0 - 200.0 * i).max(200.0)),
            interval_minutes: 15,
            start: "2020-01-01T00:00:00".into(),
            lead_steps: 1,
            seed: 7,
        }
    }

    pub fn n_features(&self) -> usize {
        3 + self.n_vars
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_vars;
        let bad = |m: &str| Err(Error::invalid(format!("synthetic config: {m}")));
        if n == 0 {
            return bad("n_vars must be positive");
        }
        if !(self.ar_coef > -1.0 && self.ar_coef < 1.0) {
            return bad("AR coefficient must lie in (-1, 1)");
        }
        if !(self.ar_noise >= 0.0 && self.observation_noise >= 0.0) {
            return bad("noise scales must be non-negative");
        }
        for p in [
            self.switch_prob,
            self.strong_share_start,
            self.strong_share_end,
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if self.regimes.len() != 2 {
            return bad("exactly two regimes (calm, strong) are required");
        }
        for r in &self.regimes {
            if r.mean.len() != n || r.loading.len() != n {
                return bad("regime vectors must have n_vars entries");
            }
            Mvn::new(r.mean.clone(), r.cov.clone())?;
        }
        if self.capacities.len() != n || self.capacities.iter().any(|c| !(*c > 0.0)) {
            return bad("capacities must be positive, one per flowgate");
        }
        if self.interval_minutes == 0 || self.lead_steps == 0 {
            return bad("interval and lead must be positive");
        }
        self.start_time()?;
        Ok(())
    }

    pub fn start_time(&self) -> Result<NaiveDateTime> {
        NaiveDateTime::parse_from_str(&self.start, TIMESTAMP_FORMAT)
            .map_err(|e| Error::invalid(format!("bad start timestamp: {e}")))
    }

    fn strong_share(&self, t: usize, len: usize) -> f64 {
        let frac = if len > 1 {
            t as f64 / (len - 1) as f64
        } else {
            0.0
        };
        self.strong_share_start + (self.strong_share_end - self.strong_share_start) * frac
    }

    /// Target law given latent state `s` and regime `r`.
    pub fn conditional(&self, s: f64, r: usize) -> Result<Mvn> {
        let spec = &self.regimes[r];
        let mean = spec
            .mean
            .iter()
            .zip(&spec.loading)
            .map(|(m, l)| m + l * s)
            .collect();
        Mvn::new(mean, spec.cov.clone())
    }
}

/// Multivariate normal with a cached Cholesky factor.
#[derive(Clone, Debug, PartialEq)]
pub struct Mvn {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    chol: DMatrix<f64>,
}

impl Mvn {
    pub fn new(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Self> {
        let n = mean.len();
        if n == 0 || cov.len() != n || cov.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("covariance shape does not match mean"));
        }
        for i in 0..n {
            for j in 0..i {
                if (cov[i][j] - cov[j][i]).abs() > 1e-12 * (1.0 + cov[i][j].abs()) {
                    return Err(Error::invalid("covariance is not symmetric"));
                }
            }
        }
        let m = DMatrix::from_fn(n, n, |i, j| cov[i][j]);
        let chol = m
            .cholesky()
            .ok_or_else(|| Error::invalid("covariance is not positive definite"))?
            .l();
        Ok(Mvn { mean, cov, chol })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = &self.chol * z;
        self.mean.iter().zip(x.iter()).map(|(m, v)| m + v).collect()
    }

    /// Mean and standard deviation of coordinate `i` given the other
    /// coordinates of `x`.
    pub fn conditional_moments(&self, i: usize, x: &[f64]) -> (f64, f64) {
        let n = self.dim();
        if n == 1 {
            return (self.mean[0], self.cov[0][0].sqrt());
        }
        let others: Vec<usize> = (0..n).filter(|&k| k != i).collect();
        let soo = DMatrix::from_fn(n - 1, n - 1, |a, b| self.cov[others[a]][others[b]]);
        let sio = DVector::from_fn(n - 1, |a, _| self.cov[i][others[a]]);
        let d = DVector::from_fn(n - 1, |a, _| x[others[a]] - self.mean[others[a]]);
        let inv = soo.cholesky().expect("sub-block of a PD matrix").inverse();
        let w = &inv * &sio;
        let mu = self.mean[i] + w.dot(&d);
        let var = self.cov[i][i] - w.dot(&sio);
        (mu, var.max(0.0).sqrt())
    }

    pub fn conditional_cdf(&self, i: usize, x: &[f64]) -> f64 {
        let (mu, sd) = self.conditional_moments(i, x);
        Normal::new(mu, sd).expect("positive sd").cdf(x[i])
    }

    pub fn conditional_quantile(&self, i: usize, x: &[f64], alpha: f64) -> f64 {
        let (mu, sd) = self.conditional_moments(i, x);
        Normal::new(mu, sd).expect("positive sd").inverse_cdf(alpha)
    }

    pub fn correlation(&self, i: usize, j: usize) -> f64 {
        self.cov[i][j] / (self.cov[i][i] * self.cov[j][j]).sqrt()
    }
}

/// Latent path of a generated series; gives the exact target law for any
/// window anchor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub latent: Vec<f64>,
    pub regime: Vec<usize>,
}

impl GroundTruth {
    /// Law of `SM_{anchor+τ}` given everything observed up to `anchor`.
    pub fn target_law(&self, anchor: usize) -> Result<Mvn> {
        if anchor >= self.latent.len() {
            return Err(Error::invalid(format!("anchor {anchor} beyond the series")));
        }
        self.config
            .conditional(self.latent[anchor], self.regime[anchor])
    }
}

/// Generate `length` rows. Features per row are
/// `[s_t, r_t, s_t + noise, SM_t…]`.
pub fn synth_generate(cfg: &SynthConfig, length: usize) -> Result<(FlowgateSeries, GroundTruth)> {
    cfg.validate()?;
    if length == 0 {
        return Err(Error::invalid("series length must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let stationary_sd = cfg.ar_noise / (1.0 - cfg.ar_coef * cfg.ar_coef).sqrt();
    let mut latent = Vec::with_capacity(length);
    let mut regime = Vec::with_capacity(length);
    let mut s = stationary_sd * rng.sample::<f64, _>(StandardNormal);
    let mut r = usize::from(rng.random::<f64>() < cfg.strong_share(0, length));
    for t in 0..length {
        if t > 0 {
            s = cfg.ar_coef * s + cfg.ar_noise * rng.sample::<f64, _>(StandardNormal);
            if rng.random::<f64>() < cfg.switch_prob {
                r = usize::from(rng.random::<f64>() < cfg.strong_share(t, length));
            }
        }
        latent.push(s);
        regime.push(r);
    }
    let t0 = cfg.start_time()?;
    let mut series = FlowgateSeries {
        timestamps: Vec::with_capacity(length),
        interval_minutes: cfg.interval_minutes,
        flow: Vec::with_capacity(length),
        capacity: Vec::with_capacity(length),
        features: Vec::with_capacity(length),
    };
    for t in 0..length {
        let src = t.saturating_sub(cfg.lead_steps);
        let sm = cfg.conditional(latent[src], regime[src])?.sample(&mut rng);
        let noisy = latent[t] + cfg.observation_noise * rng.sample::<f64, _>(StandardNormal);
        series
            .timestamps
            .push(t0 + Duration::minutes(cfg.interval_minutes as i64 * t as i64));
        series.flow.push(
            sm.iter()
                .zip(&cfg.capacities)
                .map(|(m, c)| (1.0 - m) * c)
                .collect(),
        );
        series.capacity.push(cfg.capacities.clone());
        let mut f = vec![latent[t], regime[t] as f64, noisy];
        f.extend(&sm);
        series.features.push(f);
    }
    Ok((
        series,
        GroundTruth {
            config: cfg.clone(),
            latent,
            regime,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::compute_margins;

    #[test]
    fn reproducible_and_schema() {
        let cfg = SynthConfig::with_vars(3);
        let (a, _) = synth_generate(&cfg, 50).unwrap();
        let (b, _) = synth_generate(&cfg, 50).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_features(), cfg.n_features());
        assert!(synth_generate(&cfg, 0).is_err());
    }

    #[test]
    fn margins_survive_capacity_round_trip() {
        let cfg = SynthConfig::with_vars(2);
        let (s, _) = synth_generate(&cfg, 20).unwrap();
        let m = compute_margins(&s).unwrap();
        for (row, f) in m.iter().zip(&s.features) {
            for (x, y) in row.iter().zip(&f[3..]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frozen_dynamics_give_constant_law() {
        let mut cfg = SynthConfig::with_vars(2);
        cfg.ar_noise = 0.0;
        cfg.strong_share_start = 0.0;
        cfg.strong_share_end = 0.0;
        let (_, gt) = synth_generate(&cfg, 30).unwrap();
        let first = gt.target_law(0).unwrap();
        assert!((0..29).all(|t| gt.target_law(t).unwrap() == first));
    }

    #[test]
    fn rejects_non_pd_covariance() {
        let mut cfg = SynthConfig::with_vars(2);
        cfg.regimes[0].cov = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn gaussian_conditioning() {
        let m = Mvn::new(vec![1.0, 2.0], vec![vec![4.0, 2.0], vec![2.0, 9.0]]).unwrap();
        let (mu, sd) = m.conditional_moments(0, &[0.0, 5.0]);
        assert!((mu - (1.0 + 2.0 / 9.0 * 3.0)).abs() < 1e-12);
        assert!((sd - (4.0f64 - 4.0 / 9.0).sqrt()).abs() < 1e-12);
        let q = m.conditional_quantile(0, &[0.0, 5.0], 0.3);
        assert!((m.conditional_cdf(0, &[q, 5.0]) - 0.3).abs() < 1e-12);
    }
}
