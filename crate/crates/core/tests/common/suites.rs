//! Randomized oracle and gradient suites shared by the unit-level tests and
//! the acceptance target.

use super::oracles;
use klgrade::classify::{classifier_loss, ClassifierConfig, InputMode, KlClassifier, Patch, PatchSample};
use klgrade::detect::{detector_loss, BlockSpec, DetectorConfig, DetectorInput, GridDetector, LabeledInput};
use klgrade::nn::ParamStore;
use klgrade::tensor::{BatchNormState, ConvSpec};
use klgrade::{Graph, Mode, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Denominator floor of the elementwise relative gradient error.
pub const GRAD_REL_FLOOR: f64 = 1e-6;

fn rand_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[derive(Debug)]
pub struct OracleResult {
    pub op: &'static str,
    pub cases: usize,
    pub max_error: f64,
}

/// Runs `cases` random shapes through each forward op and its nested-loop
/// oracle; reports the worst absolute deviation per op.
pub fn layer_oracle_suite(seed: u64, cases: usize) -> Vec<OracleResult> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut conv = 0.0f64;
    let mut pool = 0.0f64;
    let mut bn = 0.0f64;
    let mut lin = 0.0f64;
    for _ in 0..cases {
        // conv2d
        let n = r.random_range(1..=3);
        let c = r.random_range(1..=4);
        let o = r.random_range(1..=4);
        let k = [1, 3, 5][r.random_range(0..3)];
        let stride = r.random_range(1..=2);
        let pad = r.random_range(0..=k / 2 + 1);
        let h = r.random_range(k.max(2)..=10);
        let w = r.random_range(k.max(2)..=10);
        let x = rand_tensor(&[n, c, h, w], &mut r);
        let wt = rand_tensor(&[o, c, k, k], &mut r);
        let b = rand_tensor(&[o], &mut r);
        let (expected, oh, ow) =
            oracles::conv2d(x.data(), (n, c, h, w), wt.data(), (o, k, k), b.data(), stride, pad);
        let mut g = Graph::new();
        let (vx, vw, vb) = (g.constant(x), g.constant(wt), g.constant(b));
        let y = g
            .conv2d(vx, vw, vb, ConvSpec { stride, padding: pad })
            .unwrap();
        assert_eq!(g.value(y).shape(), &[n, o, oh, ow]);
        conv = conv.max(max_abs_diff(g.value(y).data(), &expected));

        // maxpool2d
        let window = r.random_range(1..=3);
        let pstride = r.random_range(1..=3);
        let h = r.random_range(window..=11);
        let w = r.random_range(window..=11);
        let x = rand_tensor(&[n, c, h, w], &mut r);
        let expected = oracles::maxpool2d(x.data(), (n, c, h, w), window, pstride);
        let vx = g.constant(x);
        let y = g.maxpool2d(vx, window, pstride).unwrap();
        pool = pool.max(max_abs_diff(g.value(y).data(), &expected));

        // batchnorm2d, training statistics
        let bn_n = r.random_range(2..=4);
        let x = Tensor::from_fn(&[bn_n, c, h, w], |_| r.random_range(-5.0..5.0));
        let gamma = rand_tensor(&[c], &mut r);
        let beta = rand_tensor(&[c], &mut r);
        let mut state = BatchNormState::new(c);
        let expected =
            oracles::batchnorm_train(x.data(), (bn_n, c, h, w), gamma.data(), beta.data(), state.epsilon);
        let (vx, vg, vb) = (g.constant(x), g.constant(gamma), g.constant(beta));
        let y = g.batchnorm2d(vx, vg, vb, &mut state, Mode::Train).unwrap();
        bn = bn.max(max_abs_diff(g.value(y).data(), &expected));

        // linear
        let rows = r.random_range(1..=5);
        let f = r.random_range(1..=12);
        let out = r.random_range(1..=6);
        let x = rand_tensor(&[rows, f], &mut r);
        let wt = rand_tensor(&[out, f], &mut r);
        let b = rand_tensor(&[out], &mut r);
        let expected = oracles::linear(x.data(), rows, f, wt.data(), out, b.data());
        let (vx, vw, vb) = (g.constant(x), g.constant(wt), g.constant(b));
        let y = g.linear(vx, vw, vb).unwrap();
        lin = lin.max(max_abs_diff(g.value(y).data(), &expected));
    }
    vec![
        OracleResult { op: "conv2d", cases, max_error: conv },
        OracleResult { op: "maxpool2d", cases, max_error: pool },
        OracleResult { op: "batchnorm2d", cases, max_error: bn },
        OracleResult { op: "linear", cases, max_error: lin },
    ]
}

/// Scalar loss `Σ coeff ⊙ y` with fixed random coefficients, so that ops
/// whose plain sum is constant (batchnorm, softmax) still get a useful check.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let coeff = rand_tensor(g.value(y).shape(), &mut r);
    let c = g.constant(coeff);
    let p = g.mul(y, c).unwrap();
    g.sum(p)
}

#[derive(Debug)]
pub struct GradResult {
    pub op: &'static str,
    pub worst_relative_error: f64,
}

/// Central-difference checks of every differentiable graph op.
pub fn op_gradient_suite(seed: u64) -> Vec<GradResult> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |op, worst| out.push(GradResult { op, worst_relative_error: worst });

    let x = rand_tensor(&[2, 2, 5, 5], &mut r);
    let w = rand_tensor(&[3, 2, 3, 3], &mut r);
    let b = rand_tensor(&[3], &mut r);
    for (name, spec) in [
        ("conv2d", ConvSpec { stride: 1, padding: 1 }),
        ("conv2d_stride2", ConvSpec { stride: 2, padding: 1 }),
    ] {
        push(
            name,
            oracles::gradient_check(&[x.clone(), w.clone(), b.clone()], GRAD_REL_FLOOR, &mut |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], spec).unwrap();
                weighted_sum(g, y, 1)
            }),
        );
    }

    // Distinct values keep every window's maximum unique.
    let pool_in = Tensor::from_fn(&[2, 2, 6, 6], |i| ((i * 37) % 144) as f64 / 10.0 - 7.0);
    push(
        "maxpool2d",
        oracles::gradient_check(&[pool_in], GRAD_REL_FLOOR, &mut |g, v| {
            let y = g.maxpool2d(v[0], 2, 2).unwrap();
            weighted_sum(g, y, 2)
        }),
    );

    let bx = Tensor::from_fn(&[3, 2, 4, 4], |_| r.random_range(-2.0..2.0));
    let gamma = rand_tensor(&[2], &mut r);
    let beta = rand_tensor(&[2], &mut r);
    for (name, mode) in [("batchnorm2d_train", Mode::Train), ("batchnorm2d_eval", Mode::Eval)] {
        let mut state = BatchNormState::new(2);
        state.running_mean = vec![0.3, -0.2];
        state.running_var = vec![1.7, 0.6];
        push(
            name,
            oracles::gradient_check(&[bx.clone(), gamma.clone(), beta.clone()], GRAD_REL_FLOOR, &mut |g, v| {
                let mut st = state.clone();
                let y = g.batchnorm2d(v[0], v[1], v[2], &mut st, mode).unwrap();
                weighted_sum(g, y, 3)
            }),
        );
    }

    // Keep inputs away from the kink at zero.
    let rx = Tensor::from_fn(&[12], |i| if i % 2 == 0 { 0.2 + i as f64 * 0.1 } else { -0.3 - i as f64 * 0.05 });
    push(
        "relu",
        oracles::gradient_check(&[rx], GRAD_REL_FLOOR, &mut |g, v| {
            let y = g.relu(v[0]);
            weighted_sum(g, y, 4)
        }),
    );

    let sx = rand_tensor(&[10], &mut r);
    push(
        "sigmoid",
        oracles::gradient_check(&[sx], GRAD_REL_FLOOR, &mut |g, v| {
            let y = g.sigmoid(v[0]);
            weighted_sum(g, y, 5)
        }),
    );

    let lx = rand_tensor(&[3, 4], &mut r);
    let lw = rand_tensor(&[5, 4], &mut r);
    let lb = rand_tensor(&[5], &mut r);
    push(
        "linear",
        oracles::gradient_check(&[lx, lw, lb], GRAD_REL_FLOOR, &mut |g, v| {
            let y = g.linear(v[0], v[1], v[2]).unwrap();
            weighted_sum(g, y, 6)
        }),
    );

    let ca = rand_tensor(&[2, 2, 3, 3], &mut r);
    let cb = rand_tensor(&[2, 1, 3, 3], &mut r);
    push(
        "channel_concat",
        oracles::gradient_check(&[ca, cb], GRAD_REL_FLOOR, &mut |g, v| {
            let y = g.channel_concat(v[0], v[1]).unwrap();
            weighted_sum(g, y, 7)
        }),
    );

    let sl = rand_tensor(&[2, 4, 3, 3], &mut r);
    push(
        "slice_channels",
        oracles::gradient_check(&[sl], GRAD_REL_FLOOR, &mut |g, v| {
            let y = g.slice_channels(v[0], 1, 2).unwrap();
            weighted_sum(g, y, 8)
        }),
    );

    let gp = rand_tensor(&[2, 3, 4, 4], &mut r);
    push(
        "global_avg_pool",
        oracles::gradient_check(&[gp], GRAD_REL_FLOOR, &mut |g, v| {
            let y = g.global_avg_pool(v[0]).unwrap();
            weighted_sum(g, y, 9)
        }),
    );

    let logits = Tensor::from_fn(&[4, 5], |_| r.random_range(-3.0..3.0));
    push(
        "softmax_cross_entropy",
        oracles::gradient_check(&[logits], GRAD_REL_FLOOR, &mut |g, v| {
            g.softmax_cross_entropy(v[0], &[0, 4, 2, 2]).unwrap()
        }),
    );

    let bl = rand_tensor(&[2, 1, 3, 3], &mut r);
    let targets: Vec<f64> = (0..18).map(|i| if i % 7 == 0 { 1.0 } else { 0.0 }).collect();
    let weights: Vec<f64> = (0..18).map(|i| 1.0 + (i % 3) as f64).collect();
    push(
        "sigmoid_bce",
        oracles::gradient_check(&[bl], GRAD_REL_FLOOR, &mut |g, v| {
            g.sigmoid_bce(v[0], &targets, &weights).unwrap()
        }),
    );

    let mx = rand_tensor(&[8], &mut r);
    let tgt: Vec<f64> = (0..8).map(|i| i as f64 / 8.0).collect();
    let mask: Vec<f64> = (0..8).map(|i| (i % 2) as f64).collect();
    push(
        "masked_squared_error",
        oracles::gradient_check(&[mx], GRAD_REL_FLOOR, &mut |g, v| {
            g.masked_squared_error(v[0], &tgt, &mask).unwrap()
        }),
    );

    let aa = rand_tensor(&[6], &mut r);
    let ab = rand_tensor(&[6], &mut r);
    push(
        "add_mul_scale",
        oracles::gradient_check(&[aa, ab], GRAD_REL_FLOOR, &mut |g, v| {
            let s = g.add(v[0], v[1]).unwrap();
            let p = g.mul(s, v[1]).unwrap();
            let q = g.scale(p, -1.5);
            weighted_sum(g, q, 10)
        }),
    );

    out
}

/// Worst relative error between the analytic gradient of `loss` with respect
/// to every stored parameter and its central difference. `loss` must not
/// depend on anything the forward pass mutates.
fn store_gradient_check<M>(
    model: &mut M,
    store: fn(&mut M) -> &mut ParamStore,
    loss: &mut dyn FnMut(&mut M) -> (f64, Vec<Option<Tensor>>),
) -> f64 {
    let (_, grads) = loss(model);
    let mut worst: f64 = 0.0;
    for t in 0..grads.len() {
        let analytic = grads[t].clone().unwrap_or_else(|| Tensor::zeros(store(model).values()[t].shape()));
        for i in 0..analytic.len() {
            let x0 = store(model).values()[t].data()[i];
            let step = 1e-5 * x0.abs().max(1.0);
            store(model).values_mut()[t].data_mut()[i] = x0 + step;
            let up = loss(model).0;
            store(model).values_mut()[t].data_mut()[i] = x0 - step;
            let down = loss(model).0;
            store(model).values_mut()[t].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_REL_FLOOR));
        }
    }
    worst
}

fn detector_store(m: &mut GridDetector) -> &mut ParamStore {
    &mut m.store
}

fn classifier_store(m: &mut KlClassifier) -> &mut ParamStore {
    &mut m.store
}

/// Central-difference checks of the complete detector and classifier
/// (all three input modes) at 16×16 input with 4-channel blocks.
pub fn architecture_gradient_suite(seed: u64) -> Vec<GradResult> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let cfg = DetectorConfig {
        input_size: 16,
        grid: 2,
        blocks: vec![
            BlockSpec { channels: 4, stride: 2, pool: true },
            BlockSpec { channels: 4, stride: 1, pool: true },
        ],
        box_side: 4.0,
        positive_weight: 3.0,
        ..Default::default()
    };
    let mut det = GridDetector::new(cfg, seed).unwrap();
    let samples: Vec<LabeledInput> = (0..3)
        .map(|_| LabeledInput {
            input: DetectorInput {
                size: 16,
                pixels: (0..256).map(|_| r.random_range(-1.0f32..1.0)).collect(),
                scale: 1.0,
            },
            center: (r.random_range(0.5..15.5), r.random_range(0.5..15.5)),
        })
        .collect();
    let batch: Vec<&LabeledInput> = samples.iter().collect();
    out.push(GradResult {
        op: "grid_detector",
        worst_relative_error: store_gradient_check(&mut det, detector_store, &mut |m| {
            detector_loss(m, &batch).unwrap()
        }),
    });

    let ccfg = ClassifierConfig {
        input_size: 16,
        branch_widths: vec![4, 4],
        trunk_widths: vec![4],
        hidden: 4,
        ..Default::default()
    };
    let patch = |r: &mut ChaCha8Rng| Patch {
        size: 16,
        data: (0..256).map(|_| r.random_range(-1.0f32..1.0)).collect(),
    };
    let samples: Vec<PatchSample> = (0..4)
        .map(|i| PatchSample {
            id: i.to_string(),
            grade: (i % 5) as u8,
            pa: Some(patch(&mut r)),
            lat: Some(patch(&mut r)),
        })
        .collect();
    let batch: Vec<&PatchSample> = samples.iter().collect();
    for (op, mode) in [
        ("classifier_multi", InputMode::Multi),
        ("classifier_pa", InputMode::Pa),
        ("classifier_lat", InputMode::Lat),
    ] {
        let mut m = KlClassifier::new(ccfg.clone(), mode, seed).unwrap();
        out.push(GradResult {
            op,
            worst_relative_error: store_gradient_check(&mut m, classifier_store, &mut |m| {
                classifier_loss(m, &batch).unwrap()
            }),
        });
    }
    out
}
