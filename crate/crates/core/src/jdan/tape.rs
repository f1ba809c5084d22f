//! Batched JDAN evaluation on the autodiff tape.
//!
//! Every (sample, component, variable) unit becomes one entry of a batched
//! matrix product, so a whole minibatch runs as a handful of `bmm` calls.
//! Each unit carries `K` evaluation points plus two saturation lanes (the
//! ±∞ limits) through its hidden layers, and a tangent lane that carries the
//! input derivative forward.

use super::arch::{CouplingMode, JdanArch, LAYERS_PER_BLOCK};
use super::dist::DENSITY_FLOOR;
use super::unit::MonotoneUnit;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Smallest factor passed to `ln`.
const LOG_GUARD: f64 = 1e-300;

/// Tape handles for the JDAN parameters of `B` forecasts.
#[derive(Clone, Copy, Debug)]
pub struct TapeParams {
    /// `[B, weight_count]`, positive.
    pub weights: Var,
    /// `[B, bias_count]`.
    pub biases: Var,
    /// `[B, M]`; `None` in paper-literal mode.
    pub logits: Option<Var>,
}

/// Per-unit CDF and density factors, each `[B, M, N, K]`.
#[derive(Clone, Copy, Debug)]
pub struct TapeFactors {
    pub cdf: Var,
    pub pdf: Var,
}

fn batch_of(g: &Graph, arch: &JdanArch, p: &TapeParams) -> Result<usize> {
    let ws = g.shape(p.weights);
    let bs = g.shape(p.biases);
    if ws.len() != 2
        || bs.len() != 2
        || ws[1] != arch.weight_count()
        || bs[1] != arch.bias_count()
        || ws[0] != bs[0]
    {
        return Err(Error::shape(
            "tape params",
            format!("weights {ws:?}, biases {bs:?} for {arch:?}"),
        ));
    }
    match (arch.coupling, p.logits) {
        (CouplingMode::Mixture, Some(l)) if g.shape(l) == [ws[0], arch.n_components] => {}
        (CouplingMode::PaperLiteral, None) => {}
        _ => {
            return Err(Error::shape(
                "tape params",
                "logits do not match coupling mode",
            ))
        }
    }
    Ok(ws[0])
}

/// Evaluate all units at the unit-space points `z`, a `[B, N, K]` constant
/// (note the variable axis precedes the point axis).
pub fn unit_factors(g: &mut Graph, arch: &JdanArch, p: &TapeParams, z: Var) -> Result<TapeFactors> {
    let b = batch_of(g, arch, p)?;
    let (m, n, w) = (arch.n_components, arch.n_vars, arch.width);
    let zs = g.shape(z).to_vec();
    if zs.len() != 3 || zs[0] != b || zs[1] != n {
        return Err(Error::shape(
            "tape points",
            format!("{zs:?} for batch {b}, {n} vars"),
        ));
    }
    let k = zs[2];
    let units = b * m * n;
    let layout = arch.layout();

    let wflat = g.reshape(p.weights, &[units, layout.weight_count()])?;
    let bflat = g.reshape(p.biases, &[units, layout.bias_count()])?;
    let x = g.reshape(z, &[b, 1, n, k])?;
    let x = g.broadcast_to(x, &[b, m, n, k])?;
    let x = g.reshape(x, &[units, 1, k])?;

    let w_in = g.slice(wflat, 1, 0, w)?;
    let w_in = g.reshape(w_in, &[units, w, 1])?;
    let b_in = g.slice(bflat, 1, 0, w)?;
    let b_in = g.reshape(b_in, &[units, w, 1])?;
    let a = g.mul(w_in, x)?;
    let a = g.add(a, b_in)?;
    let s = g.sigmoid(a)?;
    let ds = sigmoid_slope(g, s)?;
    let mut t = g.mul(ds, w_in)?;
    let sat = Tensor::new(
        vec![units, w, 2],
        (0..units * w).flat_map(|_| [1.0, 0.0]).collect(),
    )?;
    let sat = g.constant(sat)?;
    let mut h = g.concat(&[s, sat], 2)?;

    for blk in 0..layout.n_blocks {
        let mut a = h;
        let mut da = t;
        for layer in 0..LAYERS_PER_BLOCK {
            let wo = layout.block_weight_offset(blk, layer);
            let bo = layout.block_bias_offset(blk, layer);
            let wl = g.slice(wflat, 1, wo, w * w)?;
            let wl = g.reshape(wl, &[units, w, w])?;
            let bl = g.slice(bflat, 1, bo, w)?;
            let bl = g.reshape(bl, &[units, w, 1])?;
            let pre = g.bmm(wl, a)?;
            let pre = g.add(pre, bl)?;
            a = g.sigmoid(pre)?;
            let av = g.slice(a, 2, 0, k)?;
            let slope = sigmoid_slope(g, av)?;
            let dpre = g.bmm(wl, da)?;
            da = g.mul(slope, dpre)?;
        }
        h = g.add(h, a)?;
        t = g.add(t, da)?;
    }

    let wo = g.slice(wflat, 1, layout.output_weight_offset(), w)?;
    let wo = g.reshape(wo, &[units, 1, w])?;
    let bo = g.slice(bflat, 1, layout.output_bias_offset(), 1)?;
    let bo = g.reshape(bo, &[units, 1, 1])?;
    let out = g.bmm(wo, h)?;
    let out = g.add(out, bo)?;
    let dout = g.bmm(wo, t)?;
    let v = g.slice(out, 2, 0, k)?;
    let up = g.slice(out, 2, k, 1)?;
    let lo = g.slice(out, 2, k + 1, 1)?;
    let gap = g.sub(up, lo)?;
    let gap = g.clamp_min(gap, super::dist::LIMIT_GAP_GUARD)?;
    let num = g.sub(v, lo)?;
    let c = g.div(num, gap)?;
    let d = g.div(dout, gap)?;
    let (c, d) = match arch.coupling {
        CouplingMode::Mixture => (c, d),
        CouplingMode::PaperLiteral => {
            let c2 = g.mul(c, c)?;
            let cd = g.mul(c, d)?;
            (c2, g.scale(cd, 2.0)?)
        }
    };
    Ok(TapeFactors {
        cdf: g.reshape(c, &[b, m, n, k])?,
        pdf: g.reshape(d, &[b, m, n, k])?,
    })
}

fn sigmoid_slope(g: &mut Graph, s: Var) -> Result<Var> {
    let s2 = g.mul(s, s)?;
    g.sub(s, s2)
}

/// `ln πₘ` as `[B, M, 1]`.
fn log_mix(g: &mut Graph, arch: &JdanArch, p: &TapeParams, b: usize) -> Result<Option<Var>> {
    match p.logits {
        None => Ok(None),
        Some(l) => {
            let lse = g.log_sum_exp(l, 1)?;
            let lse = g.reshape(lse, &[b, 1])?;
            let lp = g.sub(l, lse)?;
            Ok(Some(g.reshape(lp, &[b, arch.n_components, 1])?))
        }
    }
}

/// Log joint density at raw-margin points, `[B, K]`. `z` holds the points in
/// unit coordinates (`[B, N, K]`) and `log_jacobian` is `Σ ln scaleᵢ`.
pub fn log_density(
    g: &mut Graph,
    arch: &JdanArch,
    p: &TapeParams,
    z: Var,
    log_jacobian: f64,
) -> Result<Var> {
    let f = unit_factors(g, arch, p, z)?;
    let b = g.shape(z)[0];
    let pdf = g.clamp_min(f.pdf, LOG_GUARD)?;
    let lf = g.ln(pdf)?;
    let mut per_comp = g.sum_axis(lf, 2)?;
    if let Some(lp) = log_mix(g, arch, p, b)? {
        per_comp = g.add(per_comp, lp)?;
    }
    let ld = g.log_sum_exp(per_comp, 1)?;
    let ld = g.add_scalar(ld, -log_jacobian)?;
    g.clamp_min(ld, DENSITY_FLOOR.ln())
}

/// Joint CDF at the points, `[B, K]`.
pub fn joint_cdf(g: &mut Graph, arch: &JdanArch, p: &TapeParams, z: Var) -> Result<Var> {
    let f = unit_factors(g, arch, p, z)?;
    let b = g.shape(z)[0];
    let mut prod = g.slice(f.cdf, 2, 0, 1)?;
    for i in 1..arch.n_vars {
        let fi = g.slice(f.cdf, 2, i, 1)?;
        prod = g.mul(prod, fi)?;
    }
    // [B, M, 1, K] -> [B, M, K]
    let k = g.shape(z)[2];
    let prod = g.reshape(prod, &[b, arch.n_components, k])?;
    let weighted = match p.logits {
        None => prod,
        Some(l) => {
            let pi = g.softmax(l)?;
            let pi = g.reshape(pi, &[b, arch.n_components, 1])?;
            g.mul(prod, pi)?
        }
    };
    g.sum_axis(weighted, 1)
}

/// Build `[B, N, K]` unit-space point constants from per-forecast point
/// lists `points[b][k][i]`.
pub fn points_tensor(points: &[Vec<Vec<f64>>], n: usize) -> Result<Tensor> {
    let b = points.len();
    let k = points.first().map_or(0, Vec::len);
    if b == 0
        || k == 0
        || points
            .iter()
            .any(|p| p.len() != k || p.iter().any(|v| v.len() != n))
    {
        return Err(Error::shape("tape points", "ragged or empty point lists"));
    }
    let mut data = vec![0.0; b * n * k];
    for (bi, pts) in points.iter().enumerate() {
        for (ki, v) in pts.iter().enumerate() {
            for (i, &x) in v.iter().enumerate() {
                data[(bi * n + i) * k + ki] = x;
            }
        }
    }
    Tensor::new(vec![b, n, k], data)
}

/// Host copy of a unit for cross-checking tape values.
pub fn unit_from_rows(
    arch: &JdanArch,
    weights: &[f64],
    biases: &[f64],
    u: usize,
) -> Result<MonotoneUnit> {
    let l = arch.layout();
    let (uw, ub) = (l.weight_count(), l.bias_count());
    MonotoneUnit::from_flat(
        l,
        weights[u * uw..(u + 1) * uw].to_vec(),
        biases[u * ub..(u + 1) * ub].to_vec(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jdan::{ForecastDistribution, JdanParams, MarginScale, RandomInit};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(mode: CouplingMode, m: usize) -> (JdanArch, Vec<JdanParams>) {
        let arch = JdanArch::new(3, m, 2, 5, mode).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ps = (0..2)
            .map(|_| JdanParams::random(&arch, &RandomInit::default(), &mut rng).unwrap())
            .collect();
        (arch, ps)
    }

    fn leaves(g: &mut Graph, arch: &JdanArch, ps: &[JdanParams]) -> TapeParams {
        let b = ps.len();
        let flats: Vec<_> = ps.iter().map(JdanParams::to_flat).collect();
        let cat = |f: &dyn Fn(&crate::jdan::FlatParams) -> Vec<f64>| {
            flats.iter().flat_map(f).collect::<Vec<f64>>()
        };
        let w = g
            .param(Tensor::new(vec![b, arch.weight_count()], cat(&|f| f.weights.clone())).unwrap())
            .unwrap();
        let bi = g
            .param(Tensor::new(vec![b, arch.bias_count()], cat(&|f| f.biases.clone())).unwrap())
            .unwrap();
        let logits = (arch.logit_count() > 0).then(|| {
            g.param(Tensor::new(vec![b, arch.n_components], cat(&|f| f.logits.clone())).unwrap())
                .unwrap()
        });
        TapeParams {
            weights: w,
            biases: bi,
            logits,
        }
    }

    #[test]
    fn tape_matches_host_distribution() {
        for (mode, m) in [(CouplingMode::Mixture, 3), (CouplingMode::PaperLiteral, 1)] {
            let (arch, ps) = setup(mode, m);
            let scale = MarginScale {
                loc: vec![0.1, -0.2, 0.3],
                scale: vec![0.5, 2.0, 1.5],
            };
            let pts: Vec<Vec<Vec<f64>>> = (0..2)
                .map(|b| {
                    (0..4)
                        .map(|k| (0..3).map(|i| 0.2 + 0.15 * (b + k + i) as f64).collect())
                        .collect()
                })
                .collect();
            let unit_pts: Vec<Vec<Vec<f64>>> = pts
                .iter()
                .map(|p| {
                    p.iter()
                        .map(|v| {
                            v.iter()
                                .enumerate()
                                .map(|(i, &x)| scale.to_unit(i, x))
                                .collect()
                        })
                        .collect()
                })
                .collect();
            let mut g = Graph::new();
            let tp = leaves(&mut g, &arch, &ps);
            let z = g.constant(points_tensor(&unit_pts, 3).unwrap()).unwrap();
            let ld = log_density(&mut g, &arch, &tp, z, scale.log_jacobian()).unwrap();
            let cdf = joint_cdf(&mut g, &arch, &tp, z).unwrap();
            for (b, p) in ps.iter().enumerate() {
                let d = ForecastDistribution::new(p.clone(), scale.clone()).unwrap();
                for k in 0..4 {
                    let want = d.joint_density(&pts[b][k]).unwrap().ln();
                    let got = g.value(ld).data()[b * 4 + k];
                    assert!((want - got).abs() < 1e-10, "{mode:?} {want} {got}");
                    let want = d.joint_cdf(&pts[b][k]).unwrap();
                    let got = g.value(cdf).data()[b * 4 + k];
                    assert!((want - got).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let (arch, ps) = setup(CouplingMode::Mixture, 3);
        let mut g = Graph::new();
        let tp = leaves(&mut g, &arch, &ps);
        let z = g.constant(Tensor::zeros(&[2, 2, 1])).unwrap();
        assert!(log_density(&mut g, &arch, &tp, z, 0.0).is_err());
        let bad = TapeParams { logits: None, ..tp };
        let z = g.constant(Tensor::zeros(&[2, 3, 1])).unwrap();
        assert!(log_density(&mut g, &arch, &bad, z, 0.0).is_err());
    }
}
