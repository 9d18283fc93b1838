//! Reference implementations written directly from the textbook definitions,
//! deliberately sharing no code with the library kernels.

#![allow(dead_code)]

use klgrade::{Graph, Tensor, Var};

/// Direct cross-correlation with explicit zero padding.
pub fn conv2d(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    weight: &[f64],
    (o, kh, kw): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias[oc];
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let yy = (y * stride + i) as isize - pad as isize;
                                let xx = (xo * stride + j) as isize - pad as isize;
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * c + ic) * h + yy as usize) * w + xx as usize];
                                let wv = weight[((oc * c + ic) * kh + i) * kw + j];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

pub fn maxpool2d(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    window: usize,
    stride: usize,
) -> Vec<f64> {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for i in 0..window {
                        for j in 0..window {
                            m = m.max(x[((b * c + ch) * h + y * stride + i) * w + xo * stride + j]);
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    out
}

/// Training-mode batch normalization from per-channel statistics.
pub fn batchnorm_train(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let mut vals = Vec::new();
        for b in 0..n {
            for i in 0..h * w {
                vals.push(x[(b * c + ch) * h * w + i]);
            }
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        for b in 0..n {
            for i in 0..h * w {
                let idx = (b * c + ch) * h * w + i;
                out[idx] = gamma[ch] * (x[idx] - mean) / (var + eps).sqrt() + beta[ch];
            }
        }
    }
    out
}

pub fn linear(x: &[f64], n: usize, f: usize, weight: &[f64], o: usize, bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * o];
    for r in 0..n {
        for j in 0..o {
            let mut acc = 0.0;
            for k in 0..f {
                acc += x[r * f + k] * weight[j * f + k];
            }
            out[r * o + j] = acc + bias[j];
        }
    }
    out
}

pub fn cross_entropy(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        let row = &logits[r * k..(r + 1) * k];
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[l].exp() / denom).ln();
    }
    total / n as f64
}

/// Worst elementwise relative error between analytic and central-difference
/// gradients of `build`, over every input tensor.
///
/// The relative error of one element is `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check(
    inputs: &[Tensor],
    floor: f64,
    build: &mut dyn FnMut(&mut Graph, &[Var]) -> Var,
) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v).expect("grad populated")).collect();

    let eval = |inputs: &[Tensor], build: &mut dyn FnMut(&mut Graph, &[Var]) -> Var| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).data()[0]
    };

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for t in 0..inputs.len() {
        for i in 0..inputs[t].len() {
            let x0 = inputs[t].data()[i];
            let step = 1e-5 * x0.abs().max(1.0);
            work[t].data_mut()[i] = x0 + step;
            let up = eval(&work, build);
            work[t].data_mut()[i] = x0 - step;
            let down = eval(&work, build);
            work[t].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[t].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Weighted kappa straight from the pairwise definition:
/// `1 − mean_k w(a_k, b_k) / mean_{k,l} w(a_k, b_l)`, with
/// `w = |i−j|^p / 4^p` (p = 0 meaning the 0/1 disagreement weight).
pub fn kappa_bruteforce(a: &[u8], b: &[u8], power: u32) -> f64 {
    let w = |i: u8, j: u8| -> f64 {
        let d = (i as f64 - j as f64).abs();
        if power == 0 {
            if d > 0.0 { 1.0 } else { 0.0 }
        } else {
            d.powi(power as i32) / 4f64.powi(power as i32)
        }
    };
    let n = a.len() as f64;
    let mut observed = 0.0;
    for k in 0..a.len() {
        observed += w(a[k], b[k]);
    }
    let mut chance = 0.0;
    for k in 0..a.len() {
        for l in 0..b.len() {
            chance += w(a[k], b[l]);
        }
    }
    if chance == 0.0 {
        return 1.0;
    }
    1.0 - (observed / n) / (chance / (n * n))
}
