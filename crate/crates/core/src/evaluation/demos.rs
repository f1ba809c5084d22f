//! Executable structure checks.
//!
//! * Monotone networks with positive weights are coordinatewise monotone,
//!   but their mixed partials are not sign-constrained, so they are not
//!   CDFs in general. JDAN-structured networks are.
//! * Paper-literal coupling always yields a product density.
//! * Fitting a JDAN directly to a target CDF on a grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::autodiff::{sigmoid, softplus, AdamConfig, AdamState, Graph, Tensor};
use crate::error::{Error, Result};
use crate::jdan::tape::{self, points_tensor, TapeParams};
use crate::jdan::{
    CouplingMode, FlatParams, ForecastDistribution, JdanArch, JdanParams, MarginScale, RandomInit,
};

/// Step of the box finite difference used for mixed partials.
pub const MIXED_STEP: f64 = 1e-3;

/// `∂²F/∂x∂y` at `(x, y)` from the probability of the surrounding box.
pub fn mixed_partial(f: impl Fn(f64, f64) -> f64, x: f64, y: f64, h: f64) -> f64 {
    (f(x + h, y + h) - f(x + h, y - h) - f(x - h, y + h) + f(x - h, y - h)) / (4.0 * h * h)
}

/// Generic two-input network: two sigmoid hidden layers and a sigmoid
/// output, all weights positive.
#[derive(Clone, Debug)]
pub struct PositiveNet {
    layers: Vec<(Vec<Vec<f64>>, Vec<f64>)>,
}

impl PositiveNet {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, width: usize) -> Self {
        let sizes = [2, width, width, 1];
        let layers = sizes
            .windows(2)
            .map(|io| {
                let w = (0..io[1])
                    .map(|_| (0..io[0]).map(|_| rng.random_range(0.1..3.0)).collect())
                    .collect();
                let b = (0..io[1]).map(|_| rng.random_range(-3.0..3.0)).collect();
                (w, b)
            })
            .collect();
        PositiveNet { layers }
    }

    /// Output and its gradient with respect to the two inputs.
    pub fn eval_with_grad(&self, x: f64, y: f64) -> (f64, [f64; 2]) {
        let mut v = vec![x, y];
        let mut dv = vec![[1.0, 0.0], [0.0, 1.0]];
        for (w, b) in &self.layers {
            let mut nv = Vec::with_capacity(b.len());
            let mut ndv = Vec::with_capacity(b.len());
            for (row, bias) in w.iter().zip(b) {
                let a = row.iter().zip(&v).map(|(p, q)| p * q).sum::<f64>() + bias;
                let s = sigmoid(a);
                let ds = s * (1.0 - s);
                let mut g = [0.0; 2];
                for (p, d) in row.iter().zip(&dv) {
                    g[0] += p * d[0] * ds;
                    g[1] += p * d[1] * ds;
                }
                nv.push(s);
                ndv.push(g);
            }
            v = nv;
            dv = ndv;
        }
        (v[0], dv[0])
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.eval_with_grad(x, y).0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedPartialScan {
    pub min_first_partial: f64,
    pub min_mixed_partial: f64,
    /// Grid points with mixed partial below the threshold.
    pub negative_points: usize,
}

fn scan(
    f: impl Fn(f64, f64) -> f64,
    first: impl Fn(f64, f64) -> [f64; 2],
    lo: f64,
    hi: f64,
    n: usize,
    threshold: f64,
) -> MixedPartialScan {
    let mut out = MixedPartialScan {
        min_first_partial: f64::INFINITY,
        min_mixed_partial: f64::INFINITY,
        negative_points: 0,
    };
    for a in 0..n {
        for b in 0..n {
            let x = lo + (hi - lo) * a as f64 / (n - 1) as f64;
            let y = lo + (hi - lo) * b as f64 / (n - 1) as f64;
            let g = first(x, y);
            out.min_first_partial = out.min_first_partial.min(g[0]).min(g[1]);
            let m = mixed_partial(&f, x, y, MIXED_STEP);
            out.min_mixed_partial = out.min_mixed_partial.min(m);
            if m < threshold {
                out.negative_points += 1;
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedPartialDemoConfig {
    pub n_nets: usize,
    pub width: usize,
    pub grid: usize,
    pub seed: u64,
    /// Mixed-partial threshold for generic nets.
    pub generic_threshold: f64,
    /// Mixed-partial threshold for JDAN nets.
    pub jdan_threshold: f64,
}

impl Default for MixedPartialDemoConfig {
    fn default() -> Self {
        MixedPartialDemoConfig {
            n_nets: 20,
            width: 6,
            grid: 50,
            seed: 0,
            generic_threshold: -1e-4,
            jdan_threshold: -1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedPartialDemoReport {
    pub generic: Vec<MixedPartialScan>,
    pub jdan: Vec<MixedPartialScan>,
    /// Share of generic nets with at least one negative mixed partial.
    pub generic_negative_share: f64,
    pub generic_min_first_partial: f64,
    pub jdan_negative_points: usize,
}

/// Probe random generic and JDAN-structured networks on a grid.
pub fn mixed_partial_demo(cfg: &MixedPartialDemoConfig) -> Result<MixedPartialDemoReport> {
    if cfg.n_nets == 0 || cfg.grid < 2 || cfg.width == 0 {
        return Err(Error::invalid(
            "need at least one net, a 2-point grid and positive width",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let generic: Vec<MixedPartialScan> = (0..cfg.n_nets)
        .map(|_| {
            let net = PositiveNet::random(&mut rng, cfg.width);
            scan(
                |x, y| net.eval(x, y),
                |x, y| net.eval_with_grad(x, y).1,
                -3.0,
                3.0,
                cfg.grid,
                cfg.generic_threshold,
            )
        })
        .collect();
    let jdan = (0..cfg.n_nets)
        .map(|k| {
            let (m, mode) = if k % 2 == 0 {
                (3, CouplingMode::Mixture)
            } else {
                (1, CouplingMode::PaperLiteral)
            };
            let arch = JdanArch::new(2, m, 1, cfg.width, mode)?;
            let p = JdanParams::random(&arch, &RandomInit::default(), &mut rng)?;
            let d = ForecastDistribution::new(p, MarginScale::identity(2))?;
            let f = |x: f64, y: f64| d.joint_cdf(&[x, y]).unwrap_or(f64::NAN);
            let first = |x: f64, y: f64| {
                let h = 1e-6;
                [
                    (f(x + h, y) - f(x - h, y)) / (2.0 * h),
                    (f(x, y + h) - f(x, y - h)) / (2.0 * h),
                ]
            };
            Ok(scan(f, first, -0.5, 1.5, cfg.grid, cfg.jdan_threshold))
        })
        .collect::<Result<Vec<_>>>()?;
    let flagged = generic.iter().filter(|s| s.negative_points > 0).count();
    Ok(MixedPartialDemoReport {
        generic_negative_share: flagged as f64 / cfg.n_nets as f64,
        generic_min_first_partial: generic
            .iter()
            .map(|s| s.min_first_partial)
            .fold(f64::INFINITY, f64::min),
        jdan_negative_points: jdan.iter().map(|s| s.negative_points).sum(),
        generic,
        jdan,
    })
}

/// Largest `|f(x) − Πᵢ fᵢ(xᵢ)|` over `points`, with `fᵢ` the implied
/// marginal densities.
pub fn factorization_residual(dist: &ForecastDistribution, points: &[Vec<f64>]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for p in points {
        let joint = dist.joint_density(p)?;
        let prod: f64 = p
            .iter()
            .enumerate()
            .map(|(i, &x)| dist.marginal(i, x).1)
            .product();
        worst = worst.max((joint - prod).abs());
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FitTarget {
    /// Equal-weight mixture of axis-aligned normals along the diagonal.
    CorrelatedMixture,
    /// Product of two normal CDFs.
    IndependentProduct,
    /// The CDF of a random JDAN of the fitted architecture, which is also
    /// the starting point.
    Realizable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub target: FitTarget,
    pub coupling: CouplingMode,
    pub n_components: usize,
    pub n_blocks: usize,
    pub width: usize,
    pub grid: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Stop once the mean squared error falls to this level.
    pub tolerance: f64,
    pub seed: u64,
}

impl FitConfig {
    pub fn new(target: FitTarget, coupling: CouplingMode) -> Self {
        FitConfig {
            target,
            coupling,
            n_components: if coupling == CouplingMode::Mixture {
                8
            } else {
                1
            },
            n_blocks: 1,
            width: 8,
            grid: 30,
            iterations: 3000,
            learning_rate: 0.02,
            tolerance: 1e-14,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub max_abs_error: f64,
    pub final_loss: f64,
    pub iterations: usize,
}

pub struct FitOutcome {
    pub report: FitReport,
    pub dist: ForecastDistribution,
}

const FIT_LO: f64 = -0.5;
const FIT_HI: f64 = 1.5;

fn target_cdf(target: &FitTarget, x: f64, y: f64) -> f64 {
    let n = Normal::standard();
    match target {
        FitTarget::CorrelatedMixture => {
            let centers = [(0.2, 0.25), (0.5, 0.5), (0.8, 0.75)];
            centers
                .iter()
                .map(|(cx, cy)| n.cdf((x - cx) / 0.1) * n.cdf((y - cy) / 0.1))
                .sum::<f64>()
                / 3.0
        }
        FitTarget::IndependentProduct => n.cdf((x - 0.4) / 0.15) * n.cdf((y - 0.6) / 0.2),
        FitTarget::Realizable => unreachable!("realizable targets come from a network"),
    }
}

/// `softplus⁻¹(w)` for `w > 0`.
fn inverse_softplus(w: f64) -> f64 {
    if w > 30.0 {
        w
    } else {
        w.exp_m1().ln()
    }
}

/// Fit JDAN parameters directly (no forecast network) to a target CDF on a
/// `grid × grid` lattice over `[−0.5, 1.5]²` by least squares; the weights
/// are softplus images of free variables.
pub fn coupling_fit_test(cfg: &FitConfig) -> Result<FitOutcome> {
    if cfg.grid < 2 || cfg.iterations == 0 {
        return Err(Error::invalid(
            "fit needs a 2-point grid and at least one iteration",
        ));
    }
    let arch = JdanArch::new(2, cfg.n_components, cfg.n_blocks, cfg.width, cfg.coupling)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = JdanParams::random(&arch, &RandomInit::default(), &mut rng)?;
    let axis: Vec<f64> = (0..cfg.grid)
        .map(|k| FIT_LO + (FIT_HI - FIT_LO) * k as f64 / (cfg.grid - 1) as f64)
        .collect();
    let points: Vec<Vec<f64>> = axis
        .iter()
        .flat_map(|&x| axis.iter().map(move |&y| vec![x, y]))
        .collect();
    let target: Vec<f64> = match cfg.target {
        FitTarget::Realizable => {
            let d = ForecastDistribution::new(init.clone(), MarginScale::identity(2))?;
            points
                .iter()
                .map(|p| d.joint_cdf(p))
                .collect::<Result<_>>()?
        }
        ref t => points.iter().map(|p| target_cdf(t, p[0], p[1])).collect(),
    };
    let flat = init.to_flat();
    let mut free = vec![
        Tensor::new(
            vec![1, flat.weights.len()],
            flat.weights.iter().map(|&w| inverse_softplus(w)).collect(),
        )?,
        Tensor::new(vec![1, flat.biases.len()], flat.biases.clone())?,
    ];
    if cfg.coupling == CouplingMode::Mixture {
        free.push(Tensor::new(
            vec![1, flat.logits.len()],
            flat.logits.clone(),
        )?);
    }
    let z = points_tensor(std::slice::from_ref(&points), 2)?;
    let target_t = Tensor::new(vec![1, points.len()], target.clone())?;
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.learning_rate,
            ..AdamConfig::default()
        },
        &free.iter().collect::<Vec<_>>(),
    );
    let decay_at = cfg.iterations * 3 / 5;
    let mut final_loss = f64::NAN;
    let mut iterations = 0;
    for it in 0..cfg.iterations {
        if it == decay_at {
            adam.config.lr = cfg.learning_rate / 10.0;
        }
        let mut g = Graph::new();
        let vars = free
            .iter()
            .map(|t| g.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let weights = g.softplus(vars[0])?;
        let tp = TapeParams {
            weights,
            biases: vars[1],
            logits: vars.get(2).copied(),
        };
        let zc = g.constant(z.clone())?;
        let cdf = tape::joint_cdf(&mut g, &arch, &tp, zc)?;
        let tc = g.constant(target_t.clone())?;
        let diff = g.sub(cdf, tc)?;
        let sq = g.mul(diff, diff)?;
        let loss = g.mean(sq)?;
        final_loss = g.value(loss).data()[0];
        if !final_loss.is_finite() {
            return Err(Error::Diverged { epoch: it });
        }
        if final_loss <= cfg.tolerance {
            break;
        }
        iterations = it + 1;
        let mut grads = g.backward(loss)?;
        let gs: Vec<Tensor> = vars.iter().map(|&v| grads.take(v)).collect();
        adam.step(&mut free.iter_mut().collect::<Vec<_>>(), &gs)?;
    }
    let fitted = JdanParams::from_flat(
        &arch,
        &FlatParams {
            weights: free[0].data().iter().map(|&v| softplus(v)).collect(),
            biases: free[1].data().to_vec(),
            logits: free.get(2).map_or_else(Vec::new, |t| t.data().to_vec()),
        },
    )?;
    let dist = ForecastDistribution::new(fitted, MarginScale::identity(2))?;
    let mut max_abs_error: f64 = 0.0;
    for (p, t) in points.iter().zip(&target) {
        max_abs_error = max_abs_error.max((dist.joint_cdf(p)? - t).abs());
    }
    Ok(FitOutcome {
        report: FitReport {
            max_abs_error,
            final_loss,
            iterations,
        },
        dist,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positive_net_gradient_matches_finite_difference() {
        let net = PositiveNet::random(&mut ChaCha8Rng::seed_from_u64(3), 5);
        let (x, y, h) = (0.3, -0.7, 1e-6);
        let g = net.eval_with_grad(x, y).1;
        assert!((g[0] - (net.eval(x + h, y) - net.eval(x - h, y)) / (2.0 * h)).abs() < 1e-8);
        assert!((g[1] - (net.eval(x, y + h) - net.eval(x, y - h)) / (2.0 * h)).abs() < 1e-8);
    }

    #[test]
    fn mixed_partial_of_product_cdf() {
        // F = x·y on the unit square has mixed partial 1.
        assert!((mixed_partial(|x, y| x * y, 0.4, 0.6, 1e-3) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn realizable_fit_starts_exact() {
        let cfg = FitConfig {
            iterations: 5,
            grid: 8,
            ..FitConfig::new(FitTarget::Realizable, CouplingMode::Mixture)
        };
        let r = coupling_fit_test(&cfg).unwrap().report;
        assert!(r.max_abs_error < 1e-6);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn inverse_softplus_round_trip() {
        for w in [1e-3, 0.5, 4.0, 50.0] {
            assert!((softplus(inverse_softplus(w)) - w).abs() < 1e-12 * w.max(1.0));
        }
    }
}
