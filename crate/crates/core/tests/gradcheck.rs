mod common;

use common::{full_loss_gradcheck, gradcheck, random_tensor};
use mdc_core::autodiff::{Graph, Tensor, Var};
use mdc_core::nfn::{lstm_sequence, LstmLayer, LstmVars};
use mdc_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 100;
const TOL: f64 = 1e-6;

/// Contract a tensor-valued op to a scalar with a fixed random weighting so
/// every output element contributes a distinct gradient.
fn weighted(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let w = g.constant(random_tensor(&mut rng, &shape, -1.0, 1.0))?;
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn shape(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..4)).collect()
}

fn check_unary(name: &str, lo: f64, hi: f64, op: impl Fn(&mut Graph, Var) -> Result<Var>) {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rank = rng.random_range(1..4);
        let s = shape(&mut rng, rank);
        let x = random_tensor(&mut rng, &s, lo, hi);
        let e = gradcheck(&[x], |g, v| {
            let y = op(g, v[0])?;
            weighted(g, y, seed)
        });
        assert!(e < TOL, "{name} instance {seed}: {e:e}");
    }
}

fn check_binary(name: &str, lo: f64, hi: f64, op: impl Fn(&mut Graph, Var, Var) -> Result<Var>) {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = shape(&mut rng, 3);
        // Broadcast the second operand along a random subset of axes.
        let t: Vec<usize> = s
            .iter()
            .map(|&d| if rng.random::<bool>() { 1 } else { d })
            .collect();
        let a = random_tensor(&mut rng, &s, lo, hi);
        let b = random_tensor(&mut rng, &t, lo, hi);
        let e = gradcheck(&[a, b], |g, v| {
            let y = op(g, v[0], v[1])?;
            weighted(g, y, seed)
        });
        assert!(e < TOL, "{name} instance {seed}: {e:e}");
    }
}

#[test]
fn elementwise_unary() {
    check_unary("neg", -2.0, 2.0, |g, x| g.neg(x));
    check_unary("scale", -2.0, 2.0, |g, x| g.scale(x, -1.7));
    check_unary("add_scalar", -2.0, 2.0, |g, x| g.add_scalar(x, 0.3));
    check_unary("sigmoid", -4.0, 4.0, |g, x| g.sigmoid(x));
    check_unary("tanh", -3.0, 3.0, |g, x| g.tanh(x));
    check_unary("softplus", -5.0, 5.0, |g, x| g.softplus(x));
    check_unary("exp", -2.0, 2.0, |g, x| g.exp(x));
    check_unary("ln", 0.2, 3.0, |g, x| g.ln(x));
    check_unary("sqrt", 0.2, 3.0, |g, x| g.sqrt(x));
    check_unary("recip", 0.3, 3.0, |g, x| g.recip(x));
    check_unary("clamp_min", 0.5, 2.0, |g, x| g.clamp_min(x, 0.1));
}

#[test]
fn elementwise_binary_with_broadcasting() {
    check_binary("add", -2.0, 2.0, |g, a, b| g.add(a, b));
    check_binary("sub", -2.0, 2.0, |g, a, b| g.sub(a, b));
    check_binary("mul", -2.0, 2.0, |g, a, b| g.mul(a, b));
    check_binary("div", 0.5, 2.0, |g, a, b| g.div(a, b));
}

#[test]
fn reductions_and_softmax() {
    check_unary("sum", -2.0, 2.0, |g, x| g.sum(x));
    check_unary("mean", -2.0, 2.0, |g, x| g.mean(x));
    check_unary("softmax", -3.0, 3.0, |g, x| g.softmax(x));
    check_unary("sum_axis", -2.0, 2.0, |g, x| {
        let a = g.shape(x).len() - 1;
        g.sum_axis(x, a)
    });
    check_unary("log_sum_exp", -3.0, 3.0, |g, x| g.log_sum_exp(x, 0));
}

#[test]
fn products() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k, n, b) = (
            rng.random_range(1..4),
            rng.random_range(1..4),
            rng.random_range(1..4),
            rng.random_range(1..4),
        );
        let a = random_tensor(&mut rng, &[m, k], -1.0, 1.0);
        let c = random_tensor(&mut rng, &[k, n], -1.0, 1.0);
        let e = gradcheck(&[a, c], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted(g, y, seed)
        });
        assert!(e < TOL, "matmul {seed}: {e:e}");
        let ba = if seed % 3 == 0 { 1 } else { b };
        let a = random_tensor(&mut rng, &[ba, m, k], -1.0, 1.0);
        let x = random_tensor(&mut rng, &[b, k, n], -1.0, 1.0);
        let e = gradcheck(&[a, x], |g, v| {
            let y = g.bmm(v[0], v[1])?;
            weighted(g, y, seed)
        });
        assert!(e < TOL, "bmm {seed}: {e:e}");
    }
}

#[test]
fn structural_ops() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = shape(&mut rng, 3);
        let axis = rng.random_range(0..3);
        let mut t = s.clone();
        t[axis] = rng.random_range(1..4);
        let a = random_tensor(&mut rng, &s, -1.0, 1.0);
        let b = random_tensor(&mut rng, &t, -1.0, 1.0);
        let e = gradcheck(&[a.clone(), b], |g, v| {
            let y = g.concat(&[v[0], v[1]], axis)?;
            weighted(g, y, seed)
        });
        assert!(e < TOL, "concat {seed}: {e:e}");
        let start = rng.random_range(0..s[axis]);
        let len = rng.random_range(1..=s[axis] - start);
        let e = gradcheck(std::slice::from_ref(&a), |g, v| {
            let y = g.slice(v[0], axis, start, len)?;
            weighted(g, y, seed)
        });
        assert!(e < TOL, "slice {seed}: {e:e}");
        let total: usize = s.iter().product();
        let e = gradcheck(std::slice::from_ref(&a), |g, v| {
            let y = g.reshape(v[0], &[total])?;
            weighted(g, y, seed)
        });
        assert!(e < TOL, "reshape {seed}: {e:e}");
        let small: Vec<usize> = s
            .iter()
            .map(|&d| if rng.random::<bool>() { 1 } else { d })
            .collect();
        let c = random_tensor(&mut rng, &small, -1.0, 1.0);
        let e = gradcheck(&[c], |g, v| {
            let y = g.broadcast_to(v[0], &s)?;
            weighted(g, y, seed)
        });
        assert!(e < TOL, "broadcast_to {seed}: {e:e}");
    }
}

#[test]
fn lstm_all_fifteen_tensors() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layer = LstmLayer::init(3, 4, &mut rng);
    let tensors: Vec<Tensor> = layer.tensors().into_iter().cloned().collect();
    assert_eq!(tensors.len(), 15);
    let xs: Vec<Tensor> = (0..4)
        .map(|_| random_tensor(&mut rng, &[2, 3], -1.0, 1.0))
        .collect();
    let e = gradcheck(&tensors, |g, v| {
        let vars = LstmVars {
            w_ix: v[0],
            w_ih: v[1],
            w_ic: v[2],
            w_fx: v[3],
            w_fh: v[4],
            w_fc: v[5],
            w_cx: v[6],
            w_ch: v[7],
            w_ox: v[8],
            w_oh: v[9],
            w_oc: v[10],
            b_i: v[11],
            b_f: v[12],
            b_c: v[13],
            b_o: v[14],
        };
        let xs: Vec<Var> = xs
            .iter()
            .map(|x| g.constant(x.clone()))
            .collect::<Result<_>>()?;
        let hs = lstm_sequence(g, &vars, &xs, 4)?;
        let last = *hs.last().expect("non-empty sequence");
        weighted(g, last, 5)
    });
    assert!(e < TOL, "lstm: {e:e}");
}

#[test]
fn end_to_end_mle_loss() {
    let (worst, count) = full_loss_gradcheck(3);
    assert!(count > 500);
    assert!(worst < 1e-4, "full loss: {worst:e} over {count} parameters");
}
