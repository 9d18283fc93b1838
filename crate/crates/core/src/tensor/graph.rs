use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{invalid, shape_err, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Stride 1 with "same" padding for a square odd kernel.
    pub fn same(kernel: usize) -> Self {
        ConvSpec {
            stride: 1,
            padding: kernel / 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of a batch-normalization layer. The affine `gamma`
/// and `beta` are ordinary graph parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNorm2d {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    SliceChannels {
        input: Var,
        start: usize,
    },
    GlobalAvgPool(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SigmoidBce {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        total_weight: f64,
    },
    MaskedSquaredError {
        input: Var,
        target: Vec<f64>,
        mask: Vec<f64>,
        total_mask: f64,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// A define-by-run tape. Nodes are appended in evaluation order, so reverse
/// insertion order is a valid topological order for the backward sweep.
///
/// A graph is single-threaded; build one per training step.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: ConvSpec) -> Result<Var> {
        let (n, c_in, h, w) = self.value(input).dims4()?;
        let (c_out, wc, kh, kw) = self.value(weight).dims4()?;
        if wc != c_in {
            return Err(shape_err!(
                "conv2d input {:?} has {} channels but weight {:?} expects {}",
                self.value(input).shape(),
                c_in,
                self.value(weight).shape(),
                wc
            ));
        }
        if self.value(bias).shape() != [c_out] {
            return Err(shape_err!(
                "conv2d bias {:?} does not match {} output channels",
                self.value(bias).shape(),
                c_out
            ));
        }
        if spec.stride == 0 {
            return Err(invalid!("conv2d stride must be positive"));
        }
        if h + 2 * spec.padding < kh || w + 2 * spec.padding < kw {
            return Err(shape_err!(
                "conv2d kernel {}x{} larger than padded input {:?}",
                kh,
                kw,
                self.value(input).shape()
            ));
        }
        let oh = (h + 2 * spec.padding - kh) / spec.stride + 1;
        let ow = (w + 2 * spec.padding - kw) / spec.stride + 1;
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride: spec.stride,
            pad: spec.padding,
            oh,
            ow,
        };
        let mut out = vec![0.0; n * c_out * oh * ow];
        kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &mut out,
        );
        let value = Tensor::new(vec![n, c_out, oh, ow], out)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let dims = self.value(input).dims4()?;
        if window == 0 || stride == 0 {
            return Err(invalid!("maxpool window and stride must be positive"));
        }
        if dims.2 < window || dims.3 < window {
            return Err(shape_err!(
                "maxpool window {} exceeds spatial size {}x{}",
                window,
                dims.2,
                dims.3
            ));
        }
        let (out, argmax, oh, ow) =
            kernels::maxpool2d_forward(dims, window, stride, self.value(input).data());
        let value = Tensor::new(vec![dims.0, dims.1, oh, ow], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, rg, Op::MaxPool2d { input, argmax }))
    }

    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        mode: Mode,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(shape_err!(
                    "batchnorm {} {:?} does not match {} channels",
                    name,
                    self.value(v).shape(),
                    c
                ));
            }
        }
        if state.running_mean.len() != c || state.running_var.len() != c {
            return Err(shape_err!("batchnorm running buffers do not match {} channels", c));
        }
        let training = mode == Mode::Train;
        if training && n < 2 {
            return Err(invalid!("batchnorm in train mode needs batch size >= 2, got {}", n));
        }
        let plane = h * w;
        let count = (n * plane) as f64;
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let (mean, istd) = if training {
                let mut sum = 0.0;
                for s in 0..n {
                    sum += x[(s * c + ch) * plane..][..plane].iter().sum::<f64>();
                }
                let mean = sum / count;
                let mut sq = 0.0;
                for s in 0..n {
                    sq += x[(s * c + ch) * plane..][..plane]
                        .iter()
                        .map(|v| (v - mean) * (v - mean))
                        .sum::<f64>();
                }
                let var = sq / count;
                let m = state.momentum;
                state.running_mean[ch] = (1.0 - m) * state.running_mean[ch] + m * mean;
                let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
                state.running_var[ch] = (1.0 - m) * state.running_var[ch] + m * unbiased;
                (mean, 1.0 / (var + state.epsilon).sqrt())
            } else {
                (
                    state.running_mean[ch],
                    1.0 / (state.running_var[ch] + state.epsilon).sqrt(),
                )
            };
            inv_std[ch] = istd;
            for s in 0..n {
                let base = (s * c + ch) * plane;
                for i in base..base + plane {
                    let xh = (x[i] - mean) * istd;
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(&[input, gamma, beta]);
        Ok(self.push(
            value,
            rg,
            Op::BatchNorm2d {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let src = self.value(input);
        let value = Tensor::from_fn(src.shape(), |i| src.data()[i].max(0.0));
        let rg = self.rg(&[input]);
        self.push(value, rg, Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let src = self.value(input);
        let value = Tensor::from_fn(src.shape(), |i| kernels::sigmoid(src.data()[i]));
        let rg = self.rg(&[input]);
        self.push(value, rg, Op::Sigmoid(input))
    }

    /// `input · weightᵀ + bias` for `input: N x F`, `weight: O x F`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, f) = self.value(input).dims2()?;
        let (o, wf) = self.value(weight).dims2()?;
        if wf != f || self.value(bias).shape() != [o] {
            return Err(shape_err!(
                "linear input {:?}, weight {:?}, bias {:?} are incompatible",
                self.value(input).shape(),
                self.value(weight).shape(),
                self.value(bias).shape()
            ));
        }
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; n * o];
        for r in 0..n {
            let xr = &x[r * f..(r + 1) * f];
            for j in 0..o {
                let wr = &wt[j * f..(j + 1) * f];
                out[r * o + j] = b[j] + xr.iter().zip(wr).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        let value = Tensor::new(vec![n, o], out)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(value, rg, Op::Linear { input, weight, bias }))
    }

    /// Concatenates two NCHW tensors along channels, `a` first.
    pub fn channel_concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(shape_err!(
                "channel_concat needs matching N, H, W: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let plane = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(na * (ca + cb) * plane);
        for s in 0..na {
            out.extend_from_slice(&da[s * ca * plane..(s + 1) * ca * plane]);
            out.extend_from_slice(&db[s * cb * plane..(s + 1) * cb * plane]);
        }
        let value = Tensor::new(vec![na, ca + cb, ha, wa], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Concat { a, b }))
    }

    /// Channels `[start, start + len)` of an NCHW tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if start + len > c {
            return Err(shape_err!(
                "channel slice {}..{} out of range for {} channels",
                start,
                start + len,
                c
            ));
        }
        let plane = h * w;
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(n * len * plane);
        for s in 0..n {
            out.extend_from_slice(&src[(s * c + start) * plane..(s * c + start + len) * plane]);
        }
        let value = Tensor::new(vec![n, len, h, w], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, rg, Op::SliceChannels { input, start }))
    }

    /// NCHW -> N x C spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let plane = h * w;
        let src = self.value(input).data();
        let out: Vec<f64> = (0..n * c)
            .map(|p| src[p * plane..(p + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, rg, Op::GlobalAvgPool(input)))
    }

    /// Mean over the batch of `-ln softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(shape_err!("{} labels for {} logit rows", labels.len(), n));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid!("label {} out of range for {} classes", bad, k));
        }
        let z = self.value(logits).data();
        let mut probs = z.to_vec();
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &z[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            kernels::softmax_in_place(&mut probs[r * k..(r + 1) * k]);
        }
        let value = Tensor::scalar(loss / n as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Weighted mean binary cross-entropy of `sigmoid(logits)` against
    /// `targets`, normalized by the total weight.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let z = self.value(logits).data();
        if targets.len() != z.len() || weights.len() != z.len() {
            return Err(shape_err!(
                "sigmoid_bce: {} logits, {} targets, {} weights",
                z.len(),
                targets.len(),
                weights.len()
            ));
        }
        let total_weight: f64 = weights.iter().sum();
        if total_weight <= 0.0 {
            return Err(invalid!("sigmoid_bce weights must have a positive sum"));
        }
        let loss: f64 = z
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&x, &t), &w)| w * (kernels::softplus(x) - x * t))
            .sum::<f64>()
            / total_weight;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SigmoidBce {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                total_weight,
            },
        ))
    }

    /// `Σ mask·(input − target)² / Σ mask`; zero when the mask is empty.
    pub fn masked_squared_error(&mut self, input: Var, target: &[f64], mask: &[f64]) -> Result<Var> {
        let x = self.value(input).data();
        if target.len() != x.len() || mask.len() != x.len() {
            return Err(shape_err!(
                "masked_squared_error: {} inputs, {} targets, {} mask entries",
                x.len(),
                target.len(),
                mask.len()
            ));
        }
        let total_mask: f64 = mask.iter().sum();
        let loss = if total_mask > 0.0 {
            x.iter()
                .zip(target)
                .zip(mask)
                .map(|((&v, &t), &m)| m * (v - t) * (v - t))
                .sum::<f64>()
                / total_mask
        } else {
            0.0
        };
        let rg = self.rg(&[input]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::MaskedSquaredError {
                input,
                target: target.to_vec(),
                mask: mask.to_vec(),
                total_mask,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let value = Tensor::from_fn(self.value(a).shape(), |i| da[i] + db[i]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err!(
                "mul: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let value = Tensor::from_fn(self.value(a).shape(), |i| da[i] * db[i]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let src = self.value(input);
        let value = Tensor::from_fn(src.shape(), |i| src.data()[i] * factor);
        let rg = self.rg(&[input]);
        self.push(value, rg, Op::Scale(input, factor))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).data().iter().sum());
        let rg = self.rg(&[input]);
        self.push(value, rg, Op::Sum(input))
    }

    /// Back-propagates from a single-element `loss`, overwriting any
    /// gradients from an earlier sweep.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let Some(gout) = node.grad.take() else {
                continue;
            };
            if node.requires_grad {
                propagate(before, node, &gout);
            }
            node.grad = Some(gout);
        }
        Ok(())
    }
}

/// Gradient buffer of an upstream node, or `None` if it needs no gradient.
fn slot(nodes: &mut [Node], v: Var) -> Option<&mut Vec<f64>> {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(node.grad.get_or_insert_with(|| vec![0.0; len]))
}

fn propagate(up: &mut [Node], node: &Node, gout: &[f64]) {
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
        } => {
            let x = up[input.0].value.data().to_vec();
            let w = up[weight.0].value.data().to_vec();
            let mut gi = slot(up, *input).map(std::mem::take);
            let mut gw = slot(up, *weight).map(std::mem::take);
            let mut gb = slot(up, *bias).map(std::mem::take);
            kernels::conv2d_backward(
                geom,
                &x,
                &w,
                gout,
                gi.as_deref_mut(),
                gw.as_deref_mut(),
                gb.as_deref_mut(),
            );
            for (v, g) in [(input, gi), (weight, gw), (bias, gb)] {
                if let Some(g) = g {
                    up[v.0].grad = Some(g);
                }
            }
        }
        Op::MaxPool2d { input, argmax } => {
            if let Some(gi) = slot(up, *input) {
                for (&idx, g) in argmax.iter().zip(gout) {
                    gi[idx] += g;
                }
            }
        }
        Op::BatchNorm2d {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            training,
        } => {
            let shape = node.value.shape();
            let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
            let count = (n * plane) as f64;
            let gamma_v = up[gamma.0].value.data().to_vec();
            let mut sum_dy = vec![0.0; c];
            let mut sum_dy_xhat = vec![0.0; c];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * plane;
                    for i in base..base + plane {
                        sum_dy[ch] += gout[i];
                        sum_dy_xhat[ch] += gout[i] * xhat[i];
                    }
                }
            }
            if let Some(gg) = slot(up, *gamma) {
                for ch in 0..c {
                    gg[ch] += sum_dy_xhat[ch];
                }
            }
            if let Some(gb) = slot(up, *beta) {
                for ch in 0..c {
                    gb[ch] += sum_dy[ch];
                }
            }
            if let Some(gi) = slot(up, *input) {
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        let scale = gamma_v[ch] * inv_std[ch];
                        for i in base..base + plane {
                            gi[i] += if *training {
                                scale
                                    * (gout[i]
                                        - sum_dy[ch] / count
                                        - xhat[i] * sum_dy_xhat[ch] / count)
                            } else {
                                scale * gout[i]
                            };
                        }
                    }
                }
            }
        }
        Op::Relu(input) => {
            let x = up[input.0].value.data().to_vec();
            if let Some(gi) = slot(up, *input) {
                for ((d, &xv), g) in gi.iter_mut().zip(&x).zip(gout) {
                    if xv > 0.0 {
                        *d += g;
                    }
                }
            }
        }
        Op::Sigmoid(input) => {
            let y = node.value.data();
            if let Some(gi) = slot(up, *input) {
                for ((d, &yv), g) in gi.iter_mut().zip(y).zip(gout) {
                    *d += g * yv * (1.0 - yv);
                }
            }
        }
        Op::Linear {
            input,
            weight,
            bias,
        } => {
            let x = up[input.0].value.data().to_vec();
            let (n, f) = (up[input.0].value.shape()[0], up[input.0].value.shape()[1]);
            let w = up[weight.0].value.data().to_vec();
            let o = up[weight.0].value.shape()[0];
            if let Some(gi) = slot(up, *input) {
                for r in 0..n {
                    for j in 0..o {
                        let g = gout[r * o + j];
                        for (d, wv) in gi[r * f..(r + 1) * f].iter_mut().zip(&w[j * f..(j + 1) * f]) {
                            *d += g * wv;
                        }
                    }
                }
            }
            if let Some(gw) = slot(up, *weight) {
                for r in 0..n {
                    for j in 0..o {
                        let g = gout[r * o + j];
                        for (d, xv) in gw[j * f..(j + 1) * f].iter_mut().zip(&x[r * f..(r + 1) * f]) {
                            *d += g * xv;
                        }
                    }
                }
            }
            if let Some(gb) = slot(up, *bias) {
                for r in 0..n {
                    for j in 0..o {
                        gb[j] += gout[r * o + j];
                    }
                }
            }
        }
        Op::Concat { a, b } => {
            let shape = node.value.shape();
            let (n, plane) = (shape[0], shape[2] * shape[3]);
            let ca = up[a.0].value.shape()[1];
            let cb = up[b.0].value.shape()[1];
            let ct = ca + cb;
            if let Some(ga) = slot(up, *a) {
                for s in 0..n {
                    for (d, g) in ga[s * ca * plane..(s + 1) * ca * plane]
                        .iter_mut()
                        .zip(&gout[s * ct * plane..])
                    {
                        *d += g;
                    }
                }
            }
            if let Some(gb) = slot(up, *b) {
                for s in 0..n {
                    for (d, g) in gb[s * cb * plane..(s + 1) * cb * plane]
                        .iter_mut()
                        .zip(&gout[(s * ct + ca) * plane..])
                    {
                        *d += g;
                    }
                }
            }
        }
        Op::SliceChannels { input, start } => {
            let shape = node.value.shape();
            let (n, len, plane) = (shape[0], shape[1], shape[2] * shape[3]);
            let c = up[input.0].value.shape()[1];
            if let Some(gi) = slot(up, *input) {
                for s in 0..n {
                    let dst = &mut gi[(s * c + start) * plane..(s * c + start + len) * plane];
                    for (d, g) in dst.iter_mut().zip(&gout[s * len * plane..]) {
                        *d += g;
                    }
                }
            }
        }
        Op::GlobalAvgPool(input) => {
            let shape = up[input.0].value.shape();
            let plane = shape[2] * shape[3];
            if let Some(gi) = slot(up, *input) {
                for (p, g) in gout.iter().enumerate() {
                    let share = g / plane as f64;
                    for d in &mut gi[p * plane..(p + 1) * plane] {
                        *d += share;
                    }
                }
            }
        }
        Op::SoftmaxCrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let n = labels.len();
            let k = probs.len() / n;
            let scale = gout[0] / n as f64;
            if let Some(gi) = slot(up, *logits) {
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        gi[r * k + j] += scale * (probs[r * k + j] - onehot);
                    }
                }
            }
        }
        Op::SigmoidBce {
            logits,
            targets,
            weights,
            total_weight,
        } => {
            let z = up[logits.0].value.data().to_vec();
            let scale = gout[0] / total_weight;
            if let Some(gi) = slot(up, *logits) {
                for i in 0..z.len() {
                    gi[i] += scale * weights[i] * (kernels::sigmoid(z[i]) - targets[i]);
                }
            }
        }
        Op::MaskedSquaredError {
            input,
            target,
            mask,
            total_mask,
        } => {
            if *total_mask <= 0.0 {
                return;
            }
            let x = up[input.0].value.data().to_vec();
            let scale = gout[0] * 2.0 / total_mask;
            if let Some(gi) = slot(up, *input) {
                for i in 0..x.len() {
                    gi[i] += scale * mask[i] * (x[i] - target[i]);
                }
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(gi) = slot(up, *v) {
                    for (d, g) in gi.iter_mut().zip(gout) {
                        *d += g;
                    }
                }
            }
        }
        Op::Mul(a, b) => {
            let da = up[a.0].value.data().to_vec();
            let db = up[b.0].value.data().to_vec();
            if let Some(ga) = slot(up, *a) {
                for ((d, g), o) in ga.iter_mut().zip(gout).zip(&db) {
                    *d += g * o;
                }
            }
            if let Some(gb) = slot(up, *b) {
                for ((d, g), o) in gb.iter_mut().zip(gout).zip(&da) {
                    *d += g * o;
                }
            }
        }
        Op::Scale(input, factor) => {
            if let Some(gi) = slot(up, *input) {
                for (d, g) in gi.iter_mut().zip(gout) {
                    *d += g * factor;
                }
            }
        }
        Op::Sum(input) => {
            if let Some(gi) = slot(up, *input) {
                for d in gi.iter_mut() {
                    *d += gout[0];
                }
            }
        }
    }
}
