//! Named parameters and the small layer wrappers the model is built from.

use std::cell::{Ref, RefCell};
use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, BnMode, RunningStats, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StatsId(usize);

/// A trainable tensor with a unique, path-like name.
pub struct Parameter {
    pub name: String,
    value: RefCell<Tensor>,
}

impl Parameter {
    pub fn tensor(&self) -> Tensor {
        self.value.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value.borrow().shape().to_vec()
    }

    /// Module path used to group parameters in reports (first two name
    /// components, e.g. `encoder.stage2`).
    pub fn group(&self) -> &str {
        let mut dots = self.name.match_indices('.').map(|(i, _)| i);
        match (dots.next(), dots.next()) {
            (Some(_), Some(second)) => &self.name[..second],
            (Some(first), None) => &self.name[..first],
            _ => &self.name,
        }
    }
}

/// Owns every parameter and batch-norm running statistic of a model.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    stats: Vec<(String, RefCell<RunningStats>)>,
    names: HashSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn claim(&mut self, name: &str) {
        assert!(
            self.names.insert(name.to_owned()),
            "duplicate parameter name {name}"
        );
    }

    pub fn add(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> ParamId {
        self.claim(name);
        let t = Tensor::param(data, shape).expect("parameter shape");
        self.params.push(Parameter { name: name.to_owned(), value: RefCell::new(t) });
        ParamId(self.params.len() - 1)
    }

    pub fn add_stats(&mut self, name: &str, channels: usize) -> StatsId {
        self.claim(name);
        self.stats.push((name.to_owned(), RefCell::new(RunningStats::new(channels))));
        StatsId(self.stats.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> Tensor {
        self.params[id.0].tensor()
    }

    pub fn stats(&self, id: StatsId) -> &RefCell<RunningStats> {
        &self.stats[id.0].1
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn running_stats(&self) -> impl Iterator<Item = (&str, Ref<'_, RunningStats>)> {
        self.stats.iter().map(|(n, s)| (n.as_str(), s.borrow()))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn find_stats(&self, name: &str) -> Option<StatsId> {
        self.stats.iter().position(|(n, _)| n == name).map(StatsId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    /// Replaces a parameter's values with a fresh leaf (its gradient is
    /// dropped).
    pub fn set(&self, id: ParamId, data: Vec<f64>) -> Result<()> {
        let p = &self.params[id.0];
        let shape = p.shape();
        if data.len() != tensor_numel(&shape) {
            return Err(Error::shape("set", format!("{}: wrong value count for {shape:?}", p.name)));
        }
        *p.value.borrow_mut() = Tensor::param(data, &shape)?;
        Ok(())
    }

    pub fn set_stats(&self, id: StatsId, stats: RunningStats) {
        *self.stats[id.0].1.borrow_mut() = stats;
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.value.borrow().zero_grad();
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.borrow().numel()).sum()
    }
}

fn tensor_numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Uniform `[-b, b]` with `b = gain * sqrt(3 / fan_in)`; gain `sqrt(2)` is
/// Kaiming-uniform for ReLU layers.
pub fn kaiming_uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize, gain: f64) -> Vec<f64> {
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let w = kaiming_uniform(rng, cout * fan_in, fan_in, RELU_GAIN);
        let weight = store.add(&format!("{name}.weight"), w, &[cout, cin, kernel, kernel]);
        let bias = bias.then(|| store.add(&format!("{name}.bias"), vec![0.0; cout], &[cout]));
        Conv2d { weight, bias, stride, padding: kernel / 2 }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let b = self.bias.map(|b| store.get(b));
        tensor::conv2d(x, &store.get(self.weight), b.as_ref(), self.stride, self.padding)
    }
}

pub struct DepthwiseConv2d {
    pub weight: ParamId,
    pub padding: usize,
}

impl DepthwiseConv2d {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize, kernel: usize) -> Self {
        let fan_in = kernel * kernel;
        let w = kaiming_uniform(rng, channels * fan_in, fan_in, 1.0);
        let weight = store.add(&format!("{name}.weight"), w, &[channels, 1, kernel, kernel]);
        DepthwiseConv2d { weight, padding: kernel / 2 }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        tensor::depthwise_conv2d(x, &store.get(self.weight), 1, self.padding)
    }
}

pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
        gain: f64,
    ) -> Self {
        let w = kaiming_uniform(rng, dout * din, din, gain);
        Linear {
            weight: store.add(&format!("{name}.weight"), w, &[dout, din]),
            bias: store.add(&format!("{name}.bias"), vec![0.0; dout], &[dout]),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        tensor::linear(x, &store.get(self.weight), Some(&store.get(self.bias)))
    }
}

pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.add(&format!("{name}.gamma"), vec![1.0; channels], &[channels]),
            beta: store.add(&format!("{name}.beta"), vec![0.0; channels], &[channels]),
            stats: store.add_stats(&format!("{name}.running"), channels),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        tensor::batchnorm2d(x, &store.get(self.gamma), &store.get(self.beta), store.stats(self.stats), mode)
    }
}

pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(&format!("{name}.gamma"), vec![1.0; dim], &[dim]),
            beta: store.add(&format!("{name}.beta"), vec![0.0; dim], &[dim]),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        tensor::layer_norm(x, &store.get(self.gamma), &store.get(self.beta))
    }
}

/// conv3x3 -> batchnorm -> ReLU
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), cin, cout, 3, stride, false),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        Ok(self.bn.forward(store, &self.conv.forward(store, x)?, mode)?.relu())
    }
}
