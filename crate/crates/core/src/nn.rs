//! Parameter storage and the layer building blocks shared by the detector
//! and the classifiers.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{BatchNormState, ConvSpec, Graph, Mode, Tensor, Var};
use rand::Rng;
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named trainable tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on `graph` as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph) -> Bindings {
        Bindings(self.values.iter().map(|t| graph.param(t.clone())).collect())
    }

    /// Collects gradients after a backward sweep, one entry per parameter.
    pub fn grads(&self, graph: &Graph, bindings: &Bindings) -> Vec<Option<Tensor>> {
        bindings.0.iter().map(|&v| graph.grad(v)).collect()
    }
}

/// Graph handles for a [`ParamStore`], valid for one graph.
#[derive(Clone, Debug)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

/// He-normal initialization for a layer with `fan_in` inputs.
fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(
                &[out_channels, in_channels, kernel, kernel],
                in_channels * kernel * kernel,
                rng,
            ),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Conv2d {
            weight,
            bias,
            spec: ConvSpec {
                stride,
                padding: kernel / 2,
            },
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bindings, x: Var) -> Result<Var> {
        g.conv2d(x, b.var(self.weight), b.var(self.bias), self.spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: BatchNormState,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            name: name.to_string(),
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            state: BatchNormState::new(channels),
        }
    }

    pub fn forward(&mut self, g: &mut Graph, b: &Bindings, x: Var, mode: Mode) -> Result<Var> {
        g.batchnorm2d(x, b.var(self.gamma), b.var(self.beta), &mut self.state, mode)
    }

    fn buffers(&self) -> [(String, Tensor); 2] {
        let c = self.state.running_mean.len();
        [
            (
                format!("{}.running_mean", self.name),
                Tensor::new(vec![c], self.state.running_mean.clone()).expect("buffer shape"),
            ),
            (
                format!("{}.running_var", self.name),
                Tensor::new(vec![c], self.state.running_var.clone()).expect("buffer shape"),
            ),
        ]
    }

    fn load_buffers(&mut self, tensors: &mut BTreeMap<String, Tensor>) -> Result<()> {
        let c = self.state.running_mean.len();
        for (suffix, dst) in [
            ("running_mean", &mut self.state.running_mean),
            ("running_var", &mut self.state.running_var),
        ] {
            let key = format!("{}.{}", self.name, suffix);
            let t = tensors
                .remove(&key)
                .ok_or_else(|| shape_err!("checkpoint is missing `{key}`"))?;
            if t.shape() != [c] {
                return Err(shape_err!("`{key}` has shape {:?}, expected [{c}]", t.shape()));
            }
            *dst = t.into_data();
        }
        if self.state.running_var.iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "`{}.running_var` must be strictly positive",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        Linear {
            weight: store.add(
                format!("{name}.weight"),
                he_normal(&[out_features, in_features], in_features, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_features])),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bindings, x: Var) -> Result<Var> {
        g.linear(x, b.var(self.weight), b.var(self.bias))
    }
}

/// conv 3x3 -> batchnorm -> ReLU -> optional 2x2 max-pool.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub pool: bool,
}

impl ConvBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        pool: bool,
        rng: &mut R,
    ) -> Self {
        ConvBlock {
            conv: Conv2d::new(store, &format!("{name}.conv"), in_channels, out_channels, 3, stride, rng),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_channels),
            pool,
        }
    }

    /// The pool is skipped once the feature map is smaller than the 2x2
    /// window, so tiny inputs still flow through deep stacks.
    pub fn forward(&mut self, g: &mut Graph, b: &Bindings, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(g, b, x)?;
        let y = self.bn.forward(g, b, y, mode)?;
        let y = g.relu(y);
        let (_, _, h, w) = g.value(y).dims4()?;
        if self.pool && h >= 2 && w >= 2 {
            g.maxpool2d(y, 2, 2)
        } else {
            Ok(y)
        }
    }
}

/// Everything a model persists: parameters plus batch-norm buffers.
pub fn collect_state(store: &ParamStore, blocks: &[&ConvBlock]) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    for block in blocks {
        out.extend(block.bn.buffers());
    }
    out
}

/// Inverse of [`collect_state`]; every tensor must be consumed exactly.
pub fn restore_state(
    store: &mut ParamStore,
    blocks: &mut [&mut ConvBlock],
    tensors: Vec<(String, Tensor)>,
) -> Result<()> {
    let mut map: BTreeMap<String, Tensor> = tensors.into_iter().collect();
    for i in 0..store.len() {
        let name = store.names[i].clone();
        let t = map
            .remove(&name)
            .ok_or_else(|| shape_err!("checkpoint is missing `{name}`"))?;
        if t.shape() != store.values[i].shape() {
            return Err(shape_err!(
                "`{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                store.values[i].shape()
            ));
        }
        store.values[i] = t;
    }
    for block in blocks.iter_mut() {
        block.bn.load_buffers(&mut map)?;
    }
    if let Some(extra) = map.keys().next() {
        return Err(shape_err!("checkpoint has unexpected tensor `{extra}`"));
    }
    Ok(())
}
