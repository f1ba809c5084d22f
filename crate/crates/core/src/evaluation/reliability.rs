use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jdan::ForecastDistribution;
use crate::numeric;
use crate::par;
use crate::pipeline::Mvn;

/// Nominal levels 1%, 2%, …, 99%.
pub const N_LEVELS: usize = 99;
/// Largest share of samples whose conditional may fail before the report
/// is abandoned.
pub const MAX_FAILURE_SHARE: f64 = 0.01;

pub fn levels() -> Vec<f64> {
    (1..=N_LEVELS).map(|j| j as f64 / 100.0).collect()
}

/// `H(x) = 1` for `x >= 0`, else 0.
pub fn unit_step(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// A model that yields, for test sample `k`, the CDF of margin `i` given
/// the other margins of `sm`.
pub trait ConditionalForecaster: Sync {
    fn n_samples(&self) -> usize;

    fn conditional_cdf(&self, k: usize, i: usize, sm: &[f64]) -> Result<f64>;

    /// Conditional quantile by bisection on the CDF.
    fn conditional_quantile(&self, k: usize, i: usize, sm: &[f64], alpha: f64) -> Result<f64> {
        let mut x = sm.to_vec();
        numeric::bisect(
            |v| {
                x[i] = v;
                self.conditional_cdf(k, i, &x)
            },
            alpha,
            -1.0,
            2.0,
            1e-10,
        )
    }
}

/// Forecasts from per-sample JDAN distributions.
pub struct JdanForecaster<'a> {
    pub dists: &'a [ForecastDistribution],
}

impl ConditionalForecaster for JdanForecaster<'_> {
    fn n_samples(&self) -> usize {
        self.dists.len()
    }

    fn conditional_cdf(&self, k: usize, i: usize, sm: &[f64]) -> Result<f64> {
        self.dists[k].conditional_cdf(i, sm)
    }

    fn conditional_quantile(&self, k: usize, i: usize, sm: &[f64], alpha: f64) -> Result<f64> {
        crate::analytics::quantile(&self.dists[k], i, sm, alpha)
    }
}

/// The exact normal target laws of the synthetic generator.
pub struct OracleForecaster<'a> {
    pub laws: &'a [Mvn],
}

impl ConditionalForecaster for OracleForecaster<'_> {
    fn n_samples(&self) -> usize {
        self.laws.len()
    }

    fn conditional_cdf(&self, k: usize, i: usize, sm: &[f64]) -> Result<f64> {
        Ok(self.laws[k].conditional_cdf(i, sm))
    }

    fn conditional_quantile(&self, k: usize, i: usize, sm: &[f64], alpha: f64) -> Result<f64> {
        Ok(self.laws[k].conditional_quantile(i, sm, alpha))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimReliability {
    pub var: usize,
    /// `b^α` per level.
    pub deviations: Vec<f64>,
    /// Mean absolute deviation b̄.
    pub mean_abs: f64,
    /// Samples scored.
    pub samples: usize,
    /// Samples whose conditional could not be evaluated.
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub model: String,
    pub alphas: Vec<f64>,
    pub dims: Vec<DimReliability>,
}

impl ReliabilityReport {
    pub fn mean_abs(&self) -> Vec<f64> {
        self.dims.iter().map(|d| d.mean_abs).collect()
    }

    /// `alpha,b_1,…,b_N` rows for plotting.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["alpha".to_string()];
        header.extend(self.dims.iter().map(|d| format!("b_{}", d.var + 1)));
        wr.write_record(&header)?;
        for (j, a) in self.alphas.iter().enumerate() {
            let mut rec = vec![a.to_string()];
            rec.extend(self.dims.iter().map(|d| d.deviations[j].to_string()));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn summarize(
    var: usize,
    covered: &[usize],
    samples: usize,
    failures: usize,
) -> Result<DimReliability> {
    if samples == 0 {
        return Err(Error::invalid("no samples could be scored"));
    }
    if failures as f64 > MAX_FAILURE_SHARE * (samples + failures) as f64 {
        return Err(Error::Numeric(format!(
            "conditional failed on {failures} of {} samples for margin {}",
            samples + failures,
            var + 1
        )));
    }
    let deviations: Vec<f64> = levels()
        .iter()
        .zip(covered)
        .map(|(a, &c)| a - c as f64 / samples as f64)
        .collect();
    let mean_abs = deviations.iter().map(|b| b.abs()).sum::<f64>() / N_LEVELS as f64;
    Ok(DimReliability {
        var,
        deviations,
        mean_abs,
        samples,
        failures,
    })
}

/// Reliability of every conditional margin. Uses the identity
/// `q̂^α ≥ y ⟺ F(y) ≤ α` for a continuous increasing conditional CDF, so
/// one CDF evaluation per sample replaces 99 quantile searches.
pub fn reliability(
    name: &str,
    model: &dyn ConditionalForecaster,
    targets: &[Vec<f64>],
) -> Result<ReliabilityReport> {
    let n = targets.first().map_or(0, Vec::len);
    if targets.is_empty() || model.n_samples() != targets.len() {
        return Err(Error::invalid(
            "targets must be non-empty and match the model's samples",
        ));
    }
    let alphas = levels();
    let dims = (0..n)
        .map(|i| {
            let pits = par::map_range(targets.len(), |k| model.conditional_cdf(k, i, &targets[k]));
            let mut covered = vec![0usize; N_LEVELS];
            let (mut ok, mut failed) = (0, 0);
            for p in pits {
                match p {
                    Ok(u) => {
                        ok += 1;
                        for (c, a) in covered.iter_mut().zip(&alphas) {
                            if u <= *a {
                                *c += 1;
                            }
                        }
                    }
                    Err(e) if e.is_numeric() => failed += 1,
                    Err(e) => return Err(e),
                }
            }
            summarize(i, &covered, ok, failed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReliabilityReport {
        model: name.to_string(),
        alphas,
        dims,
    })
}

/// Same report computed literally: a quantile per level and sample, scored
/// with the unit step.
pub fn reliability_by_quantiles(
    name: &str,
    model: &dyn ConditionalForecaster,
    targets: &[Vec<f64>],
) -> Result<ReliabilityReport> {
    let n = targets.first().map_or(0, Vec::len);
    if targets.is_empty() || model.n_samples() != targets.len() {
        return Err(Error::invalid(
            "targets must be non-empty and match the model's samples",
        ));
    }
    let alphas = levels();
    let dims = (0..n)
        .map(|i| {
            let hits = par::map_range(targets.len(), |k| -> Result<Vec<usize>> {
                alphas
                    .iter()
                    .map(|&a| {
                        let q = model.conditional_quantile(k, i, &targets[k], a)?;
                        Ok(unit_step(q - targets[k][i]) as usize)
                    })
                    .collect()
            });
            let mut covered = vec![0usize; N_LEVELS];
            let (mut ok, mut failed) = (0, 0);
            for h in hits {
                match h {
                    Ok(h) => {
                        ok += 1;
                        covered.iter_mut().zip(h).for_each(|(c, v)| *c += v);
                    }
                    Err(e) if e.is_numeric() => failed += 1,
                    Err(e) => return Err(e),
                }
            }
            summarize(i, &covered, ok, failed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReliabilityReport {
        model: name.to_string(),
        alphas,
        dims,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Point mass at `c` for every sample.
    struct PointMass(f64, usize);

    impl ConditionalForecaster for PointMass {
        fn n_samples(&self) -> usize {
            self.1
        }
        fn conditional_cdf(&self, _: usize, i: usize, sm: &[f64]) -> Result<f64> {
            Ok(unit_step(sm[i] - self.0))
        }
        fn conditional_quantile(&self, _: usize, _: usize, _: &[f64], _: f64) -> Result<f64> {
            Ok(self.0)
        }
    }

    #[test]
    fn step_at_zero_is_one() {
        assert_eq!(unit_step(0.0), 1.0);
        assert_eq!(unit_step(-1e-300), 0.0);
    }

    #[test]
    fn point_masses_saturate() {
        let t: Vec<Vec<f64>> = (0..50).map(|k| vec![k as f64 / 50.0]).collect();
        let below = reliability_by_quantiles("below", &PointMass(-10.0, 50), &t).unwrap();
        assert!(below.dims[0]
            .deviations
            .iter()
            .zip(&below.alphas)
            .all(|(b, a)| b == a));
        let above = reliability_by_quantiles("above", &PointMass(10.0, 50), &t).unwrap();
        assert!(above.dims[0]
            .deviations
            .iter()
            .zip(&above.alphas)
            .all(|(b, a)| (b - (a - 1.0)).abs() < 1e-15));
    }

    #[test]
    fn oracle_is_calibrated() {
        use rand::SeedableRng;
        let law = Mvn::new(vec![0.3, 0.5], vec![vec![0.01, 0.006], vec![0.006, 0.02]]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let t: Vec<Vec<f64>> = (0..5000).map(|_| law.sample(&mut rng)).collect();
        let laws = vec![law; 5000];
        let r = reliability("oracle", &OracleForecaster { laws: &laws }, &t).unwrap();
        assert!(
            r.mean_abs().iter().all(|&b| b <= 0.015),
            "{:?}",
            r.mean_abs()
        );
        let slow =
            reliability_by_quantiles("oracle", &OracleForecaster { laws: &laws }, &t).unwrap();
        for (a, b) in r.dims.iter().zip(&slow.dims) {
            for (x, y) in a.deviations.iter().zip(&b.deviations) {
                assert!((x - y).abs() <= 1.0 / 5000.0 + 1e-12);
            }
        }
    }

    #[test]
    fn plot_csv_shape() {
        let t: Vec<Vec<f64>> = (0..20).map(|k| vec![k as f64, 1.0]).collect();
        let r = reliability("m", &PointMass(0.5, 20), &t).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 100);
        assert!(text.starts_with("alpha,b_1,b_2\n"));
    }
}
