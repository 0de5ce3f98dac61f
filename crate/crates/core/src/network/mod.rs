//! Sequential layer-graph model: configuration, parameters, deterministic
//! and dropout-active forward passes, and backpropagation.

mod io;

pub use io::{load_weights, read_weights, save_weights, write_weights, MAGIC, VERSION};

use crate::error::{Error, Result};
use crate::kernels;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        window: usize,
    },
    /// Inverted dropout with drop probability `rate`.
    Dropout {
        rate: f32,
    },
    Flatten,
    Dense {
        units: usize,
    },
    Softmax,
}

impl LayerSpec {
    pub fn conv3x3(out_channels: usize) -> Self {
        LayerSpec::Conv {
            out_channels,
            kernel_size: 3,
            stride: 1,
            padding: 1,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Dense { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Softmax => "softmax",
        }
    }
}

/// A validated sequential model description.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    class_names: Vec<String>,
    /// Activation shape entering each layer, plus the final output shape.
    shapes: Vec<Vec<usize>>,
}

impl ModelConfig {
    pub fn new(input_shape: [usize; 3], layers: Vec<LayerSpec>, class_names: Vec<String>) -> Result<Self> {
        if input_shape.contains(&0) {
            return Err(Error::Config(format!("input shape {input_shape:?} has a zero dimension")));
        }
        if class_names.is_empty() {
            return Err(Error::Config("at least one class is required".into()));
        }
        match layers.iter().position(|l| *l == LayerSpec::Softmax) {
            Some(i) if i + 1 == layers.len() => {}
            _ => return Err(Error::Config("exactly one Softmax is required, as the final layer".into())),
        }
        if layers.iter().filter(|l| **l == LayerSpec::Softmax).count() != 1 {
            return Err(Error::Config("exactly one Softmax is required, as the final layer".into()));
        }

        let mut shapes = Vec::with_capacity(layers.len() + 1);
        let mut shape = input_shape.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            shapes.push(shape.clone());
            shape = propagate(layer, &shape).map_err(|e| Error::Config(format!("layer {i} ({}): {e}", layer.name())))?;
        }
        shapes.push(shape);

        let last_param = layers.iter().rev().find(|l| l.has_params());
        match last_param {
            Some(LayerSpec::Dense { units }) if *units == class_names.len() => {}
            _ => {
                return Err(Error::Config(format!(
                    "the last parameterized layer must be Dense({})",
                    class_names.len()
                )))
            }
        }

        Ok(ModelConfig {
            input_shape,
            layers,
            class_names,
            shapes,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Shape of the activation entering layer `i`; `i == layers().len()` is the output.
    pub fn shape_before(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    /// Indices of the layers that carry parameters, in order.
    pub fn param_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.has_params())
            .map(|(i, _)| i)
            .collect()
    }

    /// Expected `(weights, bias)` shapes for every parameterized layer.
    pub fn param_shapes(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        self.param_layers()
            .into_iter()
            .map(|i| {
                let input = &self.shapes[i];
                match self.layers[i] {
                    LayerSpec::Conv {
                        out_channels,
                        kernel_size,
                        ..
                    } => (
                        vec![out_channels, input[0], kernel_size, kernel_size],
                        vec![out_channels],
                    ),
                    LayerSpec::Dense { units } => (vec![units, input.iter().product()], vec![units]),
                    _ => unreachable!("param_layers only yields Conv and Dense"),
                }
            })
            .collect()
    }

    pub fn dropout_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, LayerSpec::Dropout { .. })).count()
    }

    /// Index of the first dropout layer with a non-zero rate. Everything before
    /// it is deterministic even in stochastic mode.
    pub fn first_active_dropout(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| matches!(l, LayerSpec::Dropout { rate } if *rate > 0.0))
    }

    /// Same model with every dropout rate replaced by `rate`.
    pub fn with_dropout_rate(&self, rate: f32) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Dropout { .. } => LayerSpec::Dropout { rate },
                other => *other,
            })
            .collect();
        ModelConfig::new(self.input_shape, layers, self.class_names.clone())
    }
}

fn propagate(layer: &LayerSpec, shape: &[usize]) -> std::result::Result<Vec<usize>, String> {
    let spatial = |shape: &[usize]| -> std::result::Result<(usize, usize, usize), String> {
        match shape {
            [c, h, w] => Ok((*c, *h, *w)),
            _ => Err(format!("expects a [C,H,W] input, got {shape:?}")),
        }
    };
    match *layer {
        LayerSpec::Conv {
            out_channels,
            kernel_size,
            stride,
            padding,
        } => {
            let (_, h, w) = spatial(shape)?;
            if out_channels == 0 || kernel_size == 0 || stride == 0 {
                return Err("channels, kernel size and stride must be positive".into());
            }
            if kernel_size > h + 2 * padding || kernel_size > w + 2 * padding {
                return Err(format!("kernel {kernel_size} exceeds padded input {h}x{w}"));
            }
            Ok(vec![
                out_channels,
                (h + 2 * padding - kernel_size) / stride + 1,
                (w + 2 * padding - kernel_size) / stride + 1,
            ])
        }
        LayerSpec::MaxPool { window } => {
            let (c, h, w) = spatial(shape)?;
            if window == 0 || h % window != 0 || w % window != 0 {
                return Err(format!("window {window} does not divide {h}x{w}"));
            }
            Ok(vec![c, h / window, w / window])
        }
        LayerSpec::Dropout { rate } => {
            if !(0.0..1.0).contains(&rate) {
                return Err(format!("dropout rate {rate} outside [0, 1)"));
            }
            Ok(shape.to_vec())
        }
        LayerSpec::Relu | LayerSpec::Softmax => Ok(shape.to_vec()),
        LayerSpec::Flatten => Ok(vec![shape.iter().product()]),
        LayerSpec::Dense { units } => {
            if shape.len() != 1 {
                return Err(format!("expects a flat input, got {shape:?} (missing Flatten?)"));
            }
            if units == 0 {
                return Err("units must be positive".into());
            }
            Ok(vec![units])
        }
    }
}

/// Three blocks of two 3x3 convolutions (16, 32, 64 channels), each block
/// closed by 2x2 max pooling and dropout 0.2, then a 512-unit dense layer
/// with dropout 0.3 and a softmax head.
pub fn build_reference_model(input_shape: [usize; 3], class_names: Vec<String>) -> Result<ModelConfig> {
    let [_, h, w] = input_shape;
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Config(format!(
            "reference model needs height and width divisible by 8, got {h}x{w}"
        )));
    }
    let mut layers = Vec::new();
    for channels in [16, 32, 64] {
        layers.extend([
            LayerSpec::conv3x3(channels),
            LayerSpec::Relu,
            LayerSpec::conv3x3(channels),
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2 },
            LayerSpec::Dropout { rate: 0.2 },
        ]);
    }
    layers.extend([
        LayerSpec::Flatten,
        LayerSpec::Dense { units: 512 },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: 0.3 },
        LayerSpec::Dense {
            units: class_names.len(),
        },
        LayerSpec::Softmax,
    ]);
    ModelConfig::new(input_shape, layers, class_names)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBundle {
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Parameters of every Conv/Dense layer, in layer order. Also used as the
/// gradient accumulator during training.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub bundles: Vec<ParamBundle>,
}

impl WeightSet {
    /// Glorot-uniform weights in ±sqrt(6/(fan_in+fan_out)), zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let bundles = config
            .param_shapes()
            .into_iter()
            .zip(config.param_layers())
            .map(|((w_shape, b_shape), layer)| {
                let receptive: usize = w_shape[2..].iter().product();
                let fan_in = w_shape[1] * receptive;
                let fan_out = w_shape[0] * receptive;
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut r = rng::stream(seed, layer as u64);
                ParamBundle {
                    weights: Tensor::from_fn(&w_shape, |_| (rng::symmetric_f64(&mut r) * bound) as f32),
                    bias: Tensor::zeros(&b_shape),
                }
            })
            .collect();
        WeightSet { bundles }
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let bundles = config
            .param_shapes()
            .into_iter()
            .map(|(w, b)| ParamBundle {
                weights: Tensor::zeros(&w),
                bias: Tensor::zeros(&b),
            })
            .collect();
        WeightSet { bundles }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let expected = config.param_shapes();
        if expected.len() != self.bundles.len() {
            return Err(Error::WeightShape(format!(
                "config has {} parameterized layers, weight set has {}",
                expected.len(),
                self.bundles.len()
            )));
        }
        for (i, ((w, b), bundle)) in expected.iter().zip(&self.bundles).enumerate() {
            if bundle.weights.shape() != w.as_slice() || bundle.bias.shape() != b.as_slice() {
                return Err(Error::WeightShape(format!(
                    "bundle {i}: expected {w:?}/{b:?}, got {:?}/{:?}",
                    bundle.weights.shape(),
                    bundle.bias.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.bundles.iter().map(|b| b.weights.len() + b.bias.len()).sum()
    }

    /// All tensors in file order: weights then bias per bundle.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.bundles.iter().flat_map(|b| [&b.weights, &b.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.bundles.iter_mut().flat_map(|b| [&mut b.weights, &mut b.bias])
    }

    pub fn bit_eq(&self, other: &WeightSet) -> bool {
        self.bundles.len() == other.bundles.len()
            && self.tensors().zip(other.tensors()).all(|(a, b)| a.bit_eq(b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Deterministic,
    /// Dropout active; masks are a pure function of `(seed, layer index, element)`.
    Stochastic { seed: u64 },
}

/// What a layer remembers from the forward pass for backprop and relevance
/// propagation.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Conv { input: Tensor },
    Relu { input: Tensor },
    MaxPool { input_shape: Vec<usize>, argmax: Vec<usize> },
    /// `None` when dropout was inactive (deterministic mode or zero rate).
    Dropout { mask: Option<Vec<f32>> },
    Flatten { input_shape: Vec<usize> },
    Dense { input: Tensor },
    Softmax,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub probs: Tensor,
    pub logits: Tensor,
    /// One entry per layer of the config.
    pub caches: Vec<LayerCache>,
}

impl ForwardTrace {
    pub fn predicted_class(&self) -> usize {
        self.probs.argmax()
    }
}

fn check_inputs(config: &ModelConfig, weights: &WeightSet, image: &Tensor) -> Result<()> {
    if image.shape() != config.input_shape {
        return Err(Error::Shape(format!(
            "image shape {:?} does not match model input {:?}",
            image.shape(),
            config.input_shape
        )));
    }
    weights.validate(config)
}

/// Inverted-dropout mask: each unit kept with probability `1 − rate` and
/// scaled by `1/(1 − rate)`.
pub fn dropout_mask(len: usize, rate: f32, seed: u64, layer: usize) -> Vec<f32> {
    let mut r = rng::stream(seed, layer as u64);
    let scale = 1.0 / (1.0 - rate);
    let p = rate as f64;
    (0..len)
        .map(|_| if rng::unit_f64(&mut r) >= p { scale } else { 0.0 })
        .collect()
}

/// Runs layers `range` (never including the final Softmax) on `x`.
fn run_layers(
    config: &ModelConfig,
    weights: &WeightSet,
    range: std::ops::Range<usize>,
    mut x: Tensor,
    mode: ForwardMode,
    mut caches: Option<&mut Vec<LayerCache>>,
) -> Result<Tensor> {
    let param_index = param_index_map(config);
    for i in range {
        let layer = config.layers[i];
        let (out, cache) = match layer {
            LayerSpec::Conv { stride, padding, .. } => {
                let b = &weights.bundles[param_index[i]];
                let out = kernels::conv2d_forward(&x, &b.weights, &b.bias, stride, padding)?;
                (out, LayerCache::Conv { input: x })
            }
            LayerSpec::Dense { .. } => {
                let b = &weights.bundles[param_index[i]];
                let out = kernels::dense_forward(&x, &b.weights, &b.bias)?;
                (out, LayerCache::Dense { input: x })
            }
            LayerSpec::Relu => (kernels::relu(&x), LayerCache::Relu { input: x }),
            LayerSpec::MaxPool { window } => {
                let (out, argmax) = kernels::maxpool2d(&x, window)?;
                (
                    out,
                    LayerCache::MaxPool {
                        input_shape: x.shape().to_vec(),
                        argmax,
                    },
                )
            }
            LayerSpec::Dropout { rate } => match mode {
                ForwardMode::Stochastic { seed } if rate > 0.0 => {
                    let mask = dropout_mask(x.len(), rate, seed, i);
                    for (v, m) in x.data_mut().iter_mut().zip(&mask) {
                        *v *= m;
                    }
                    (x, LayerCache::Dropout { mask: Some(mask) })
                }
                _ => (x, LayerCache::Dropout { mask: None }),
            },
            LayerSpec::Flatten => {
                let input_shape = x.shape().to_vec();
                let n = x.len();
                (x.reshape(&[n])?, LayerCache::Flatten { input_shape })
            }
            LayerSpec::Softmax => return Err(Error::Config("softmax inside layer range".into())),
        };
        if let Some(c) = caches.as_deref_mut() {
            c.push(cache);
        }
        x = out;
    }
    Ok(x)
}

/// Maps layer index → bundle index (only meaningful for parameterized layers).
fn param_index_map(config: &ModelConfig) -> Vec<usize> {
    let mut next = 0;
    config
        .layers
        .iter()
        .map(|l| {
            let idx = next;
            if l.has_params() {
                next += 1;
            }
            idx
        })
        .collect()
}

fn finish(logits: Tensor) -> (Tensor, Vec<f64>) {
    let probs = kernels::softmax(&logits);
    (Tensor::vector(kernels::to_f32(&probs)), probs)
}

/// Full forward pass with caches for every layer.
pub fn forward(config: &ModelConfig, weights: &WeightSet, image: &Tensor, mode: ForwardMode) -> Result<ForwardTrace> {
    check_inputs(config, weights, image)?;
    let n = config.layers.len();
    let mut caches = Vec::with_capacity(n);
    let logits = run_layers(config, weights, 0..n - 1, image.clone(), mode, Some(&mut caches))?;
    caches.push(LayerCache::Softmax);
    let (probs, _) = finish(logits.clone());
    Ok(ForwardTrace { probs, logits, caches })
}

/// Class probabilities only; no caches are kept.
pub fn predict(config: &ModelConfig, weights: &WeightSet, image: &Tensor, mode: ForwardMode) -> Result<Tensor> {
    check_inputs(config, weights, image)?;
    let logits = run_layers(config, weights, 0..config.layers.len() - 1, image.clone(), mode, None)?;
    Ok(finish(logits).0)
}

/// The deterministic part of a forward pass, computed once and reused
/// across many stochastic continuations.
#[derive(Debug, Clone)]
pub struct SharedPrefix {
    /// First layer that still has to run.
    pub resume_at: usize,
    pub activation: Tensor,
}

pub fn shared_prefix(config: &ModelConfig, weights: &WeightSet, image: &Tensor) -> Result<SharedPrefix> {
    check_inputs(config, weights, image)?;
    let stop = config.first_active_dropout().unwrap_or(config.layers.len() - 1);
    let activation = run_layers(config, weights, 0..stop, image.clone(), ForwardMode::Deterministic, None)?;
    Ok(SharedPrefix {
        resume_at: stop,
        activation,
    })
}

/// Finishes a forward pass from a [`SharedPrefix`]. Bit-identical to
/// [`predict`] on the original image with the same mode.
pub fn predict_from(config: &ModelConfig, weights: &WeightSet, prefix: &SharedPrefix, mode: ForwardMode) -> Result<Tensor> {
    let logits = run_layers(
        config,
        weights,
        prefix.resume_at..config.layers.len() - 1,
        prefix.activation.clone(),
        mode,
        None,
    )?;
    Ok(finish(logits).0)
}

/// Backpropagates `grad_logits` through a cached forward pass. Returns
/// parameter gradients shaped like the weight set.
pub fn backward(config: &ModelConfig, weights: &WeightSet, trace: &ForwardTrace, grad_logits: &Tensor) -> Result<WeightSet> {
    let n = config.layers.len();
    if trace.caches.len() != n {
        return Err(Error::MissingCache(format!(
            "trace holds {} layer caches, model has {n} layers",
            trace.caches.len()
        )));
    }
    let param_index = param_index_map(config);
    let mut grads = WeightSet::zeros(config);
    let mut g = grad_logits.clone();
    for i in (0..n - 1).rev() {
        g = match (&config.layers[i], &trace.caches[i]) {
            (LayerSpec::Conv { stride, padding, .. }, LayerCache::Conv { input }) => {
                let p = param_index[i];
                let cg = kernels::conv2d_backward(input, &weights.bundles[p].weights, &g, *stride, *padding)?;
                grads.bundles[p] = ParamBundle {
                    weights: cg.kernels,
                    bias: cg.bias,
                };
                cg.input
            }
            (LayerSpec::Dense { .. }, LayerCache::Dense { input }) => {
                let p = param_index[i];
                let dg = kernels::dense_backward(input, &weights.bundles[p].weights, &g)?;
                grads.bundles[p] = ParamBundle {
                    weights: dg.weights,
                    bias: dg.bias,
                };
                dg.input
            }
            (LayerSpec::Relu, LayerCache::Relu { input }) => kernels::relu_backward(input, &g)?,
            (LayerSpec::MaxPool { .. }, LayerCache::MaxPool { input_shape, argmax }) => {
                kernels::maxpool_backward(input_shape, argmax, &g)?
            }
            (LayerSpec::Dropout { .. }, LayerCache::Dropout { mask }) => {
                if let Some(mask) = mask {
                    for (v, m) in g.data_mut().iter_mut().zip(mask) {
                        *v *= m;
                    }
                }
                g
            }
            (LayerSpec::Flatten, LayerCache::Flatten { input_shape }) => g.reshape(input_shape)?,
            (layer, _) => {
                return Err(Error::MissingCache(format!(
                    "layer {i} ({}) has no matching cache",
                    layer.name()
                )))
            }
        };
    }
    Ok(grads)
}

/// Cross-entropy loss, probabilities and parameter gradients for one sample.
pub fn loss_and_gradients(
    config: &ModelConfig,
    weights: &WeightSet,
    image: &Tensor,
    label: usize,
    mode: ForwardMode,
) -> Result<(f64, Tensor, WeightSet)> {
    let trace = forward(config, weights, image, mode)?;
    let probs = kernels::softmax(&trace.logits);
    let loss = kernels::cross_entropy(&probs, label);
    let grad_logits = kernels::softmax_cross_entropy_grad(&probs, label)?;
    let grads = backward(config, weights, &trace, &grad_logits)?;
    Ok((loss, trace.probs, grads))
}
