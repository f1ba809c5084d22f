//! Finite-difference oracles and small fixtures shared by the integration
//! tests.

#![allow(dead_code, clippy::needless_range_loop)]

use mdc_core::autodiff::{Graph, Tensor, Var};
use mdc_core::jdan::{CouplingMode, JdanArch, MarginScale};
use mdc_core::nfn::{BnMode, ForecastModel, NfnArch};
use mdc_core::pipeline::SampleWindow;
use mdc_core::trainer::mle_loss;
use mdc_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
/// Central-difference step for the full loss.
pub const LOSS_STEP: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Fourth-order central difference of `f` at 0.
pub fn five_point(f: impl Fn(f64) -> f64) -> f64 {
    let h = FD_STEP;
    (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h)
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of the scalar `build(inputs)` over every input element.
pub fn gradcheck(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let eval = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vs: Vec<Var> = ts.iter().map(|t| g.param(t.clone()).unwrap()).collect();
        let out = build(&mut g, &vs).unwrap();
        g.value(out).data()[0]
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|t| g.param(t.clone()).unwrap()).collect();
    let out = build(&mut g, &vs).unwrap();
    let grads = g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vs[k]);
        for j in 0..t.len() {
            let at = |d: f64| {
                let mut ts = inputs.to_vec();
                ts[k].data_mut()[j] += d;
                eval(&ts)
            };
            let numeric = five_point(at);
            worst = worst.max(rel_err(analytic.data()[j], numeric, 1e-4));
        }
    }
    worst
}

/// N=2, M=2, W_N=4, W_J=4, δ=3 forecaster with a matching batch.
pub fn micro_setup(seed: u64) -> (ForecastModel, Vec<SampleWindow>) {
    let nfn = NfnArch {
        n_features: 5,
        lag_steps: 3,
        n_blocks: 1,
        width: 4,
    };
    let jdan = JdanArch::new(2, 2, 1, 4, CouplingMode::Mixture).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ForecastModel::new(
        nfn,
        jdan,
        MarginScale {
            loc: vec![0.5, 0.4],
            scale: vec![0.1, 0.12],
        },
        &mut rng,
    )
    .unwrap();
    let batch = (0..4)
        .map(|k| SampleWindow {
            features: (0..15).map(|_| rng.random_range(-1.5..1.5)).collect(),
            target: vec![rng.random_range(0.35..0.65), rng.random_range(0.25..0.55)],
            anchor: k,
        })
        .collect();
    (model, batch)
}

pub fn micro_loss(model: &ForecastModel, batch: &[SampleWindow]) -> f64 {
    let mut g = Graph::new();
    let vars = model.params.bind(&mut g, true).unwrap();
    let refs: Vec<&SampleWindow> = batch.iter().collect();
    let (loss, _) = mle_loss(&mut g, model, &vars, &refs, BnMode::Train).unwrap();
    g.value(loss).data()[0]
}

/// Worst relative error of the full MLE-loss gradient against central
/// differences over every parameter of the micro forecaster.
pub fn full_loss_gradcheck(seed: u64) -> (f64, usize) {
    let (model, batch) = micro_setup(seed);
    let mut g = Graph::new();
    let vars = model.params.bind(&mut g, true).unwrap();
    let refs: Vec<&SampleWindow> = batch.iter().collect();
    let (loss, _) = mle_loss(&mut g, &model, &vars, &refs, BnMode::Train).unwrap();
    let mut grads = g.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars.all().into_iter().map(|v| grads.take(v)).collect();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let n_tensors = analytic.len();
    for k in 0..n_tensors {
        let len = model.params.trainable()[k].len();
        for j in 0..len {
            let at = |d: f64| {
                let mut m = model.clone();
                m.params.trainable_mut()[k].data_mut()[j] += d;
                micro_loss(&m, &batch)
            };
            let numeric = (at(LOSS_STEP) - at(-LOSS_STEP)) / (2.0 * LOSS_STEP);
            worst = worst.max(rel_err(analytic[k].data()[j], numeric, 1e-3));
            count += 1;
        }
    }
    (worst, count)
}
