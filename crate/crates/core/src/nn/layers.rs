//! Parameterised layers and the layer vocabulary used by both networks.
//!
//! Every layer call made through this module is also reported to the
//! graph's trace (when tracing is on), which is what the analysis tools
//! walk to produce per-layer parameter and MAC tables.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Mode, TraceRecord, Var};
use super::param::{ParamId, ParamStore};
use crate::error::{config_err, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Kind and hyperparameters of one layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    DepthwiseConv2d {
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        features: usize,
    },
    Relu6,
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
        padding: usize,
    },
    AvgPool {
        window: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    ConcatChannels,
    Add,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::DepthwiseConv2d { .. } => "depthwise_conv2d",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::Relu6 => "relu6",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::AvgPool { .. } => "avg_pool",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::ConcatChannels => "concat_channels",
            LayerSpec::Add => "add",
        }
    }
}

const LINEAR_INIT_STD: f32 = 0.01;

/// Kaiming-normal (fan-out) initialisation for convolutions.
fn gaussian(rng: &mut impl Rng, shape: &[usize], fan_out: usize) -> Tensor {
    normal(rng, shape, (2.0 / fan_out as f32).sqrt())
}

fn normal(rng: &mut impl Rng, shape: &[usize], std: f32) -> Tensor {
    let normal = Normal::new(0.0f32, std).expect("finite std");
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).expect("numel matches")
}

fn trace(g: &mut Graph, name: &str, spec: LayerSpec, x: Var, y: Var) {
    if g.is_tracing() {
        let record = TraceRecord {
            name: name.to_string(),
            spec,
            input: g.shape(x).to_vec(),
            output: g.shape(y).to_vec(),
        };
        g.record(record);
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let shape = [out_channels, in_channels, kernel, kernel];
        let weight = store.add(
            format!("{name}.weight"),
            gaussian(rng, &shape, out_channels * kernel * kernel),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]), true));
        Self {
            name: name.to_string(),
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::Conv2d {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            bias: self.bias.is_some(),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        let y = g.conv2d(x, w, b, self.stride, self.padding)?;
        trace(g, &self.name, self.spec(), x, y);
        Ok(y)
    }
}

/// Depthwise convolution with channel multiplier 1.
#[derive(Clone, Debug)]
pub struct DepthwiseConv2d {
    pub name: String,
    pub weight: ParamId,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl DepthwiseConv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let shape = [channels, 1, kernel, kernel];
        let weight = store.add(
            format!("{name}.weight"),
            gaussian(rng, &shape, channels * kernel * kernel),
            true,
        );
        Self {
            name: name.to_string(),
            weight,
            channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::DepthwiseConv2d {
            channels: self.channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.depthwise_conv2d(x, w, self.stride, self.padding)?;
        trace(g, &self.name, self.spec(), x, y);
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub features: usize,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Self {
        Self {
            name: name.to_string(),
            gamma: store.add(format!("{name}.weight"), Tensor::ones(&[features]), true),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[features]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[features]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[features]), false),
            features,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.batch_norm(
            x,
            gamma,
            beta,
            (store.key(self.running_mean), store.key(self.running_var)),
            (store.values(self.running_mean), store.values(self.running_var)),
            mode,
            BN_MOMENTUM,
            BN_EPS,
        )?;
        trace(
            g,
            &self.name,
            LayerSpec::BatchNorm {
                features: self.features,
            },
            x,
            y,
        );
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            normal(rng, &[out_features, in_features], LINEAR_INIT_STD),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_features]), true));
        Self {
            name: name.to_string(),
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        let y = g.linear(x, w, b)?;
        let spec = LayerSpec::Linear {
            in_features: self.in_features,
            out_features: self.out_features,
            bias: self.bias.is_some(),
        };
        trace(g, &self.name, spec, x, y);
        Ok(y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Relu6,
}

/// Convolution (or depthwise convolution) → batch norm → activation.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: ConvKind,
    pub bn: BatchNorm2d,
    pub act: Activation,
}

#[derive(Clone, Debug)]
pub enum ConvKind {
    Dense(Conv2d),
    Depthwise(DepthwiseConv2d),
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn dense(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        act: Activation,
    ) -> Self {
        let conv = Conv2d::new(
            store,
            rng,
            &format!("{name}.conv"),
            cin,
            cout,
            kernel,
            stride,
            padding,
            false,
        );
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), cout);
        Self {
            conv: ConvKind::Dense(conv),
            bn,
            act,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn depthwise(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        act: Activation,
    ) -> Self {
        let conv = DepthwiseConv2d::new(store, rng, &format!("{name}.conv"), channels, kernel, stride, padding);
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), channels);
        Self {
            conv: ConvKind::Depthwise(conv),
            bn,
            act,
        }
    }

    pub fn name(&self) -> &str {
        match &self.conv {
            ConvKind::Dense(c) => c.name.trim_end_matches(".conv"),
            ConvKind::Depthwise(c) => c.name.trim_end_matches(".conv"),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let y = match &self.conv {
            ConvKind::Dense(c) => c.forward(g, store, x)?,
            ConvKind::Depthwise(c) => c.forward(g, store, x)?,
        };
        let y = self.bn.forward(g, store, y, mode)?;
        let name = format!("{}.act", self.name());
        Ok(match self.act {
            Activation::None => y,
            Activation::Relu => relu(g, &name, y),
            Activation::Relu6 => relu6(g, &name, y),
        })
    }
}

pub fn relu(g: &mut Graph, name: &str, x: Var) -> Var {
    let y = g.relu(x);
    trace(g, name, LayerSpec::Relu, x, y);
    y
}

pub fn relu6(g: &mut Graph, name: &str, x: Var) -> Var {
    let y = g.relu6(x);
    trace(g, name, LayerSpec::Relu6, x, y);
    y
}

pub fn max_pool(g: &mut Graph, name: &str, x: Var, window: usize, stride: usize, padding: usize) -> Result<Var> {
    let y = g.max_pool(x, window, stride, padding)?;
    trace(
        g,
        name,
        LayerSpec::MaxPool {
            window,
            stride,
            padding,
        },
        x,
        y,
    );
    Ok(y)
}

pub fn avg_pool(g: &mut Graph, name: &str, x: Var, window: usize, stride: usize) -> Result<Var> {
    let y = g.avg_pool(x, window, stride)?;
    trace(g, name, LayerSpec::AvgPool { window, stride }, x, y);
    Ok(y)
}

/// Global average pool flattened to `(N, C)`.
pub fn global_avg_pool(g: &mut Graph, name: &str, x: Var) -> Result<Var> {
    let y = g.global_avg_pool(x)?;
    trace(g, name, LayerSpec::GlobalAvgPool, x, y);
    g.flatten(y)
}

pub fn concat_channels(g: &mut Graph, name: &str, a: Var, b: Var) -> Result<Var> {
    let y = g.concat_channels(a, b)?;
    trace(g, name, LayerSpec::ConcatChannels, a, y);
    Ok(y)
}

pub fn add(g: &mut Graph, name: &str, a: Var, b: Var) -> Result<Var> {
    let y = g.add(a, b)?;
    trace(g, name, LayerSpec::Add, a, y);
    Ok(y)
}

/// Validates a depthwise spec (multiplier fixed at 1).
pub fn check_depthwise(in_channels: usize, out_channels: usize) -> Result<()> {
    if in_channels != out_channels {
        return Err(config_err!(
            "depthwise convolution needs out_channels = in_channels, got {in_channels} -> {out_channels}"
        ));
    }
    Ok(())
}
