use super::arch::{CouplingMode, JdanArch, MarginScale};
use super::params::JdanParams;
use super::unit::Direction;
use crate::error::{Error, Result};
use crate::numeric;

/// Densities below this are treated as zero before any log or division.
pub const DENSITY_FLOOR: f64 = 1e-12;

/// Minimum gap between a unit's upper and lower limits.
pub const LIMIT_GAP_GUARD: f64 = 1e-9;

/// A forecast joint distribution: JDAN parameters bound to their
/// architecture, with per-unit saturation limits cached.
#[derive(Clone, Debug)]
pub struct ForecastDistribution {
    params: JdanParams,
    scale: MarginScale,
    /// (lower, upper) per unit.
    limits: Vec<(f64, f64)>,
    mix: Vec<f64>,
}

impl ForecastDistribution {
    pub fn new(params: JdanParams, scale: MarginScale) -> Result<Self> {
        scale.validate(params.arch().n_vars)?;
        let limits = params
            .units()
            .iter()
            .map(|u| {
                let lo = u.limit(Direction::NegInf);
                let hi = u.limit(Direction::PosInf);
                let gap = hi - lo;
                if gap > LIMIT_GAP_GUARD && gap.is_finite() {
                    Ok((lo, hi))
                } else {
                    Err(Error::DegenerateUnit { gap })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mix = params.mixture_weights();
        Ok(ForecastDistribution {
            params,
            scale,
            limits,
            mix,
        })
    }

    pub fn arch(&self) -> &JdanArch {
        self.params.arch()
    }

    pub fn params(&self) -> &JdanParams {
        &self.params
    }

    pub fn margin_scale(&self) -> &MarginScale {
        &self.scale
    }

    pub fn n_vars(&self) -> usize {
        self.arch().n_vars
    }

    pub fn n_components(&self) -> usize {
        self.mix.len()
    }

    pub fn mixture_weights(&self) -> &[f64] {
        &self.mix
    }

    pub fn unit_limits(&self, m: usize, i: usize) -> (f64, f64) {
        self.limits[self.arch().unit_index(m, i)]
    }

    /// `Φ̄` of unit (m, i) at raw margin `x`; exactly 1 at +∞ and 0 at −∞.
    pub fn normalized_unit(&self, m: usize, i: usize, x: f64) -> f64 {
        self.normalized_unit_with_density(m, i, x).0
    }

    /// `Φ̄` and its derivative with respect to the raw margin.
    pub fn normalized_unit_with_density(&self, m: usize, i: usize, x: f64) -> (f64, f64) {
        if x == f64::INFINITY {
            return (1.0, 0.0);
        }
        if x == f64::NEG_INFINITY {
            return (0.0, 0.0);
        }
        let (lo, hi) = self.unit_limits(m, i);
        let z = self.scale.to_unit(i, x);
        let (v, dv) = self.params.unit(m, i).eval_with_slope(z);
        let gap = hi - lo;
        (
            ((v - lo) / gap).clamp(0.0, 1.0),
            (dv / (gap * self.scale.scale[i])).max(0.0),
        )
    }

    /// Per-unit CDF and density factors of the coupling form.
    fn factor(&self, m: usize, i: usize, x: f64) -> (f64, f64) {
        let (c, d) = self.normalized_unit_with_density(m, i, x);
        match self.arch().coupling {
            CouplingMode::Mixture => (c, d),
            CouplingMode::PaperLiteral => (c * c, 2.0 * c * d),
        }
    }

    fn check_len(&self, sm: &[f64]) -> Result<()> {
        if sm.len() != self.n_vars() {
            return Err(Error::shape(
                "joint distribution",
                format!("expected {} margins, got {}", self.n_vars(), sm.len()),
            ));
        }
        if sm.iter().any(|v| v.is_nan()) {
            return Err(Error::invalid("NaN margin"));
        }
        Ok(())
    }

    pub fn joint_cdf(&self, sm: &[f64]) -> Result<f64> {
        self.check_len(sm)?;
        let v: f64 = (0..self.n_components())
            .map(|m| {
                self.mix[m]
                    * sm.iter()
                        .enumerate()
                        .map(|(i, &x)| self.factor(m, i, x).0)
                        .product::<f64>()
            })
            .sum();
        Ok(v.clamp(0.0, 1.0))
    }

    /// Closed-form N-th mixed partial of the joint CDF.
    pub fn joint_density(&self, sm: &[f64]) -> Result<f64> {
        self.check_len(sm)?;
        Ok((0..self.n_components())
            .map(|m| {
                self.mix[m]
                    * sm.iter()
                        .enumerate()
                        .map(|(i, &x)| self.factor(m, i, x).1)
                        .product::<f64>()
            })
            .sum())
    }

    /// Joint CDF with the `held` variables sent to +∞. `free` and `held`
    /// must partition the variable indices.
    pub fn marginalized_cdf(&self, free: &[(usize, f64)], held: &[usize]) -> Result<f64> {
        let n = self.n_vars();
        let mut seen = vec![false; n];
        let mut sm = vec![f64::INFINITY; n];
        for (&i, v) in free
            .iter()
            .map(|(i, v)| (i, Some(*v)))
            .chain(held.iter().map(|i| (i, None)))
        {
            if i >= n || seen[i] {
                return Err(Error::invalid(format!(
                    "index sets must partition 0..{n}; {i} repeated or out of range"
                )));
            }
            seen[i] = true;
            if let Some(x) = v {
                sm[i] = x;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("index sets do not cover every variable"));
        }
        self.joint_cdf(&sm)
    }

    /// Conditional density and CDF of variable `i` given the other entries
    /// of `sm`. The conditioning density (the (N−1)-th mixed partial of the
    /// CDF with variable `i` at +∞) must exceed [`DENSITY_FLOOR`].
    pub fn conditional(&self, i: usize, sm: &[f64]) -> Result<(f64, f64)> {
        self.check_len(sm)?;
        if i >= self.n_vars() {
            return Err(Error::invalid(format!("variable index {i} out of range")));
        }
        let mut denom = 0.0;
        let mut num_pdf = 0.0;
        let mut num_cdf = 0.0;
        for m in 0..self.n_components() {
            let w = self.mix[m]
                * sm.iter()
                    .enumerate()
                    .filter(|&(k, _)| k != i)
                    .map(|(k, &x)| self.factor(m, k, x).1)
                    .product::<f64>();
            let (c, d) = self.factor(m, i, sm[i]);
            denom += w;
            num_pdf += w * d;
            num_cdf += w * c;
        }
        if denom.is_nan() || denom < DENSITY_FLOOR {
            return Err(Error::DensityBelowFloor { density: denom });
        }
        Ok((num_pdf / denom, (num_cdf / denom).clamp(0.0, 1.0)))
    }

    pub fn conditional_pdf(&self, i: usize, sm: &[f64]) -> Result<f64> {
        self.conditional(i, sm).map(|v| v.0)
    }

    pub fn conditional_cdf(&self, i: usize, sm: &[f64]) -> Result<f64> {
        self.conditional(i, sm).map(|v| v.1)
    }

    /// Implied marginal CDF and density of variable `i`.
    pub fn marginal(&self, i: usize, x: f64) -> (f64, f64) {
        (0..self.n_components()).fold((0.0, 0.0), |(c, d), m| {
            let (fc, fd) = self.factor(m, i, x);
            (c + self.mix[m] * fc, d + self.mix[m] * fd)
        })
    }

    /// Inverse of the per-unit CDF factor: the raw margin where it equals `u`.
    pub fn unit_quantile(&self, m: usize, i: usize, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::invalid(format!("probability {u} outside (0,1)")));
        }
        let target = match self.arch().coupling {
            CouplingMode::Mixture => u,
            CouplingMode::PaperLiteral => u.sqrt(),
        };
        let (lo, hi) = self.unit_limits(m, i);
        let gap = hi - lo;
        let unit = self.params.unit(m, i);
        // Solve in unit coordinates; the default bracket [-1, 2] is in raw
        // margins.
        let zlo = self.scale.to_unit(i, -1.0);
        let zhi = self.scale.to_unit(i, 2.0);
        let z = numeric::newton_bisect(
            |z| {
                let (v, dv) = unit.eval_with_slope(z);
                Ok(((v - lo) / gap, dv / gap))
            },
            target,
            zlo.min(zhi),
            zhi.max(zlo),
            1e-13,
        )?;
        Ok(self.scale.from_unit(i, z))
    }

    /// Joint density on the tensor grid `axes[0] × … × axes[N-1]`
    /// (row-major, last axis fastest). Uses the product structure of each
    /// component so every unit is evaluated once per axis point.
    pub fn density_on_grid(&self, axes: &[Vec<f64>]) -> Result<Vec<f64>> {
        let n = self.n_vars();
        if axes.len() != n || axes.iter().any(|a| a.is_empty()) {
            return Err(Error::shape(
                "density grid",
                "one non-empty axis per variable",
            ));
        }
        let comps = self.n_components();
        // factors[m][i][k]
        let factors: Vec<Vec<Vec<f64>>> = (0..comps)
            .map(|m| {
                (0..n)
                    .map(|i| axes[i].iter().map(|&x| self.factor(m, i, x).1).collect())
                    .collect()
            })
            .collect();
        let total: usize = axes.iter().map(Vec::len).product();
        let mut out = vec![0.0; total];
        let mut idx = vec![0usize; n];
        for o in out.iter_mut() {
            *o = (0..comps)
                .map(|m| self.mix[m] * (0..n).map(|i| factors[m][i][idx[i]]).product::<f64>())
                .sum();
            for d in (0..n).rev() {
                idx[d] += 1;
                if idx[d] < axes[d].len() {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(out)
    }
}
