//! Layer specifications and their parameterized instances.

use rand::Rng;

use crate::autodiff::{NormStats, Tape, Var};
use crate::autodiff::kernels::ConvGeom;
use crate::error::{config_err, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Dense,
    Conv2d,
    BatchNorm,
    Relu,
    MaxPool,
    AvgPool,
    Flatten,
}

impl LayerKind {
    pub fn tag(self) -> u8 {
        match self {
            LayerKind::Dense => 1,
            LayerKind::Conv2d => 2,
            LayerKind::BatchNorm => 3,
            LayerKind::Relu => 4,
            LayerKind::MaxPool => 5,
            LayerKind::AvgPool => 6,
            LayerKind::Flatten => 7,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            1 => LayerKind::Dense,
            2 => LayerKind::Conv2d,
            3 => LayerKind::BatchNorm,
            4 => LayerKind::Relu,
            5 => LayerKind::MaxPool,
            6 => LayerKind::AvgPool,
            7 => LayerKind::Flatten,
            _ => return None,
        })
    }
}

/// Kind plus hyperparameters of one layer, before parameters are allocated.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Dense { units: usize },
    Conv2d { filters: usize, kernel: usize, stride: usize, padding: usize },
    BatchNorm { eps: f64, momentum: f64 },
    Relu,
    MaxPool { size: usize, stride: usize },
    AvgPool { size: usize, stride: usize },
    Flatten,
}

impl LayerSpec {
    pub fn batch_norm() -> Self {
        LayerSpec::BatchNorm { eps: BN_EPS, momentum: BN_MOMENTUM }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Dense { .. } => LayerKind::Dense,
            LayerSpec::Conv2d { .. } => LayerKind::Conv2d,
            LayerSpec::BatchNorm { .. } => LayerKind::BatchNorm,
            LayerSpec::Relu => LayerKind::Relu,
            LayerSpec::MaxPool { .. } => LayerKind::MaxPool,
            LayerSpec::AvgPool { .. } => LayerKind::AvgPool,
            LayerSpec::Flatten => LayerKind::Flatten,
        }
    }

    /// Per-example output shape for a per-example input shape, validating
    /// the hyperparameters against that input.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Dense { units } => {
                if input.len() != 1 {
                    return Err(config_err(format!("dense layer needs a flat input, got {input:?}")));
                }
                if units == 0 {
                    return Err(config_err("dense layer with zero units"));
                }
                Ok(vec![units])
            }
            LayerSpec::Conv2d { filters, kernel, stride, padding } => {
                let [_, h, w] = input else {
                    return Err(config_err(format!("conv2d needs a [C, H, W] input, got {input:?}")));
                };
                if filters == 0 {
                    return Err(config_err("conv2d with zero filters"));
                }
                let oh = ConvGeom::out_extent(*h, kernel, stride, padding);
                let ow = ConvGeom::out_extent(*w, kernel, stride, padding);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => Ok(vec![filters, oh, ow]),
                    _ => Err(config_err(format!(
                        "conv2d kernel {kernel} stride {stride} padding {padding} does not fit input {h}x{w}"
                    ))),
                }
            }
            LayerSpec::BatchNorm { eps, momentum } => {
                if input.is_empty() {
                    return Err(config_err("batch norm on a scalar input"));
                }
                if eps <= 0.0 || !(0.0..=1.0).contains(&momentum) {
                    return Err(config_err(format!("batch norm eps {eps} momentum {momentum}")));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool { size, stride } | LayerSpec::AvgPool { size, stride } => {
                let [c, h, w] = input else {
                    return Err(config_err(format!("pooling needs a [C, H, W] input, got {input:?}")));
                };
                let oh = ConvGeom::out_extent(*h, size, stride, 0);
                let ow = ConvGeom::out_extent(*w, size, stride, 0);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => Ok(vec![*c, oh, ow]),
                    _ => Err(config_err(format!("pool window {size} stride {stride} does not tile {h}x{w}"))),
                }
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// He-uniform initialization: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
fn he_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::parameter(shape, data).expect("shape matches data")
}

fn zeros_param(n: usize) -> Tensor {
    Tensor::parameter(vec![n], vec![0.0; n]).expect("shape matches data")
}

/// A layer with its parameters (and, for batch norm, running statistics).
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense { weights: Tensor, bias: Tensor },
    Conv2d { kernels: Tensor, bias: Tensor, stride: usize, padding: usize },
    BatchNorm { gamma: Tensor, beta: Tensor, running_mean: Vec<f64>, running_var: Vec<f64>, eps: f64, momentum: f64 },
    Relu,
    MaxPool { size: usize, stride: usize },
    AvgPool { size: usize, stride: usize },
    Flatten,
}

/// Outcome of one layer's forward call.
pub struct LayerOutput {
    pub out: Var,
    pub params: Vec<Var>,
    /// Batch (mean, biased variance, element count per channel) for batch-norm in train mode.
    pub batch_stats: Option<(Vec<f64>, Vec<f64>, usize)>,
}

impl Layer {
    /// Allocates parameters for `spec` given the per-example input shape.
    /// Each layer draws from its own stream keyed by `(seed, layer_index)`.
    pub fn build(spec: &LayerSpec, input: &[usize], seed: u64, layer_index: usize) -> Result<(Layer, Vec<usize>)> {
        let out = spec.output_shape(input)?;
        let mut rng = rng_for(seed, &[0x1a7e, layer_index as u64]);
        let layer = match *spec {
            LayerSpec::Dense { units } => Layer::Dense {
                weights: he_uniform(vec![input[0], units], input[0], &mut rng),
                bias: zeros_param(units),
            },
            LayerSpec::Conv2d { filters, kernel, stride, padding } => {
                let fan_in = input[0] * kernel * kernel;
                Layer::Conv2d {
                    kernels: he_uniform(vec![filters, input[0], kernel, kernel], fan_in, &mut rng),
                    bias: zeros_param(filters),
                    stride,
                    padding,
                }
            }
            LayerSpec::BatchNorm { eps, momentum } => {
                let c = input[0];
                Layer::BatchNorm {
                    gamma: Tensor::parameter(vec![c], vec![1.0; c])?,
                    beta: zeros_param(c),
                    running_mean: vec![0.0; c],
                    running_var: vec![1.0; c],
                    eps,
                    momentum,
                }
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool { size, stride } => Layer::MaxPool { size, stride },
            LayerSpec::AvgPool { size, stride } => Layer::AvgPool { size, stride },
            LayerSpec::Flatten => Layer::Flatten,
        };
        Ok((layer, out))
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Dense { .. } => LayerKind::Dense,
            Layer::Conv2d { .. } => LayerKind::Conv2d,
            Layer::BatchNorm { .. } => LayerKind::BatchNorm,
            Layer::Relu => LayerKind::Relu,
            Layer::MaxPool { .. } => LayerKind::MaxPool,
            Layer::AvgPool { .. } => LayerKind::AvgPool,
            Layer::Flatten => LayerKind::Flatten,
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Dense { weights, .. } => LayerSpec::Dense { units: weights.shape()[1] },
            Layer::Conv2d { kernels, stride, padding, .. } => LayerSpec::Conv2d {
                filters: kernels.shape()[0],
                kernel: kernels.shape()[2],
                stride: *stride,
                padding: *padding,
            },
            Layer::BatchNorm { eps, momentum, .. } => LayerSpec::BatchNorm { eps: *eps, momentum: *momentum },
            Layer::Relu => LayerSpec::Relu,
            Layer::MaxPool { size, stride } => LayerSpec::MaxPool { size: *size, stride: *stride },
            Layer::AvgPool { size, stride } => LayerSpec::AvgPool { size: *size, stride: *stride },
            Layer::Flatten => LayerSpec::Flatten,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense { weights, bias } => vec![weights, bias],
            Layer::Conv2d { kernels, bias, .. } => vec![kernels, bias],
            Layer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense { weights, bias } => vec![weights, bias],
            Layer::Conv2d { kernels, bias, .. } => vec![kernels, bias],
            Layer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => Vec::new(),
        }
    }

    /// Records this layer on the tape. `train` selects batch statistics for
    /// batch norm; running statistics are never mutated here.
    pub fn forward(&self, tape: &mut Tape, x: Var, train: bool) -> Result<LayerOutput> {
        let plain = |out| LayerOutput { out, params: Vec::new(), batch_stats: None };
        Ok(match self {
            Layer::Dense { weights, bias } => {
                let (w, b) = (tape.param(weights), tape.param(bias));
                LayerOutput { out: tape.dense(x, w, b)?, params: vec![w, b], batch_stats: None }
            }
            Layer::Conv2d { kernels, bias, stride, padding } => {
                let (k, b) = (tape.param(kernels), tape.param(bias));
                LayerOutput { out: tape.conv2d(x, k, b, *stride, *padding)?, params: vec![k, b], batch_stats: None }
            }
            Layer::BatchNorm { gamma, beta, running_mean, running_var, eps, .. } => {
                let (g, b) = (tape.param(gamma), tape.param(beta));
                let stats = if train {
                    NormStats::Batch
                } else {
                    NormStats::Fixed { mean: running_mean, var: running_var }
                };
                let xs = tape.value(x).shape();
                let count = xs[0] * xs[2..].iter().product::<usize>();
                let (out, batch) = tape.batch_norm(x, g, b, *eps, stats)?;
                LayerOutput { out, params: vec![g, b], batch_stats: batch.map(|(m, v)| (m, v, count)) }
            }
            Layer::Relu => plain(tape.relu(x)),
            Layer::MaxPool { size, stride } => plain(tape.max_pool(x, *size, *stride)?),
            Layer::AvgPool { size, stride } => plain(tape.avg_pool(x, *size, *stride)?),
            Layer::Flatten => plain(tape.flatten(x)?),
        })
    }

    /// Folds batch statistics into the running estimates (unbiased variance).
    pub fn update_running_stats(&mut self, mean: &[f64], var: &[f64], count: usize) {
        if let Layer::BatchNorm { running_mean, running_var, momentum, .. } = self {
            let correction = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            for c in 0..running_mean.len() {
                running_mean[c] = (1.0 - *momentum) * running_mean[c] + *momentum * mean[c];
                running_var[c] = (1.0 - *momentum) * running_var[c] + *momentum * var[c] * correction;
            }
        }
    }
}
