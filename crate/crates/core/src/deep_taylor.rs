//! Deep Taylor relevance propagation.
//!
//! Relevance starts at the target logit (pre-softmax) and flows back to the
//! input pixels. Hidden Conv/Dense layers use the z⁺ rule, the first
//! parameterized layer uses the box-constrained zᴮ rule with pixel bounds
//! `[0, 1]`. ReLU and dropout pass relevance through unchanged, max pooling
//! routes it to the winning position. Biases never enter a denominator, so
//! relevance is conserved up to the ε stabiliser.

use std::io::Write;

use crate::error::{Error, Result};
use crate::format::sig6;
use crate::kernels::{self, ConvGeom};
use crate::network::{self, ForwardMode, LayerCache, LayerSpec, ModelConfig, WeightSet};
use crate::tensor::Tensor;

pub const EPSILON: f64 = 1e-9;
const LOWER_BOUND: f64 = 0.0;
const UPPER_BOUND: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    /// Non-negative relevance, shaped like the input image.
    pub relevance: Tensor,
    pub target_class: usize,
    /// Relevance injected at the top: `max(0, logit[target_class])`.
    pub output_relevance: f64,
    /// Set when the target logit was negative and the map is therefore empty.
    pub negative_logit: bool,
}

impl AttributionMap {
    pub fn total(&self) -> f64 {
        self.relevance.sum_f64()
    }

    /// Raw relevance as CSV: one line per image row, channels stacked.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let width = *self.relevance.shape().last().unwrap_or(&1);
        for row in self.relevance.data().chunks(width) {
            let line: Vec<String> = row.iter().map(|&v| sig6(v as f64)).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

pub fn relevance(
    config: &ModelConfig,
    weights: &WeightSet,
    image: &Tensor,
    target_class: Option<usize>,
) -> Result<AttributionMap> {
    let trace = network::forward(config, weights, image, ForwardMode::Deterministic)?;
    let target = target_class.unwrap_or_else(|| trace.logits.argmax());
    if target >= config.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "target class {target} out of range for {} classes",
            config.num_classes()
        )));
    }
    let logit = trace.logits.data()[target] as f64;
    let negative_logit = logit < 0.0;
    if negative_logit {
        log::warn!("target logit {logit} is negative; relevance map is empty");
    }
    let top = logit.max(0.0);

    let mut rel = vec![0.0f64; config.num_classes()];
    rel[target] = top;
    let first_param = config.param_layers().first().copied();
    let mut bundle = config.param_layers().len();

    for i in (0..config.layers().len() - 1).rev() {
        let layer = config.layers()[i];
        let cache = &trace.caches[i];
        rel = match (layer, cache) {
            (LayerSpec::Dense { .. }, LayerCache::Dense { input }) => {
                bundle -= 1;
                let w = &weights.bundles[bundle].weights;
                if Some(i) == first_param {
                    dense_zb(input.data(), w, &rel)
                } else {
                    dense_zplus(input.data(), w, &rel)
                }
            }
            (LayerSpec::Conv { stride, padding, .. }, LayerCache::Conv { input }) => {
                bundle -= 1;
                let w = &weights.bundles[bundle].weights;
                let geom = ConvGeom::new(input.shape(), w.shape(), stride, padding)?;
                if Some(i) == first_param {
                    conv_zb(&geom, input.data(), w.data(), &rel)
                } else {
                    conv_zplus(&geom, input.data(), w.data(), &rel)
                }
            }
            (LayerSpec::MaxPool { .. }, LayerCache::MaxPool { input_shape, argmax }) => {
                let mut out = vec![0.0; input_shape.iter().product()];
                for (&idx, &r) in argmax.iter().zip(&rel) {
                    out[idx] += r;
                }
                out
            }
            (LayerSpec::Relu, _) | (LayerSpec::Dropout { .. }, _) | (LayerSpec::Flatten, _) => rel,
            (layer, _) => {
                return Err(Error::MissingCache(format!(
                    "layer {i} ({}) has no matching cache",
                    layer.name()
                )))
            }
        };
    }

    Ok(AttributionMap {
        relevance: Tensor::new(image.shape().to_vec(), kernels::to_f32(&rel))?,
        target_class: target,
        output_relevance: top,
        negative_logit,
    })
}

fn positive(x: f64) -> f64 {
    x.max(0.0)
}

fn negative(x: f64) -> f64 {
    x.min(0.0)
}

fn dense_zplus(input: &[f32], weights: &Tensor, rel_out: &[f64]) -> Vec<f64> {
    let n = input.len();
    let a: Vec<f64> = input.iter().map(|&v| positive(v as f64)).collect();
    let mut carry = vec![0.0; n];
    for (row, &r) in weights.data().chunks_exact(n).zip(rel_out) {
        if r == 0.0 {
            continue;
        }
        let z: f64 = row.iter().zip(&a).map(|(&w, &ai)| ai * positive(w as f64)).sum();
        let s = r / (z + EPSILON);
        for (c, &w) in carry.iter_mut().zip(row) {
            *c += positive(w as f64) * s;
        }
    }
    a.iter().zip(carry).map(|(ai, c)| ai * c).collect()
}

/// zᴮ numerator for one (input, weight) pair, clipped at zero.
fn zb_term(x: f64, w: f64) -> f64 {
    (x * w - LOWER_BOUND * positive(w) - UPPER_BOUND * negative(w)).max(0.0)
}

fn dense_zb(input: &[f32], weights: &Tensor, rel_out: &[f64]) -> Vec<f64> {
    let n = input.len();
    let mut out = vec![0.0; n];
    for (row, &r) in weights.data().chunks_exact(n).zip(rel_out) {
        if r == 0.0 {
            continue;
        }
        let terms: Vec<f64> = row.iter().zip(input).map(|(&w, &x)| zb_term(x as f64, w as f64)).collect();
        let s = r / (terms.iter().sum::<f64>() + EPSILON);
        for (o, t) in out.iter_mut().zip(terms) {
            *o += t * s;
        }
    }
    out
}

fn conv_zplus(geom: &ConvGeom, input: &[f32], kernels_data: &[f32], rel_out: &[f64]) -> Vec<f64> {
    let a: Vec<f64> = input.iter().map(|&v| positive(v as f64)).collect();
    let wp: Vec<f64> = kernels_data.iter().map(|&w| positive(w as f64)).collect();
    let z = kernels::conv_f64(geom, &a, &wp);
    let s: Vec<f64> = z.iter().zip(rel_out).map(|(&zj, &r)| r / (zj + EPSILON)).collect();
    let carry = kernels::conv_transpose_f64(geom, &s, &wp);
    a.iter().zip(carry).map(|(ai, c)| ai * c).collect()
}

/// Direct per-pair evaluation so each numerator can be clipped.
fn conv_zb(geom: &ConvGeom, input: &[f32], kernels_data: &[f32], rel_out: &[f64]) -> Vec<f64> {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let (h, w) = (geom.height, geom.width);
    let (kh, kw) = (geom.kernel_h, geom.kernel_w);
    let mut out = vec![0.0; input.len()];
    let mut taps: Vec<(usize, f64)> = Vec::with_capacity(geom.in_channels * kh * kw);
    for o in 0..geom.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let r = rel_out[(o * oh + oy) * ow + ox];
                if r == 0.0 {
                    continue;
                }
                taps.clear();
                for c in 0..geom.in_channels {
                    for ky in 0..kh {
                        let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = (c * h + iy as usize) * w + ix as usize;
                            let wv = kernels_data[((o * geom.in_channels + c) * kh + ky) * kw + kx] as f64;
                            taps.push((idx, zb_term(input[idx] as f64, wv)));
                        }
                    }
                }
                let s = r / (taps.iter().map(|t| t.1).sum::<f64>() + EPSILON);
                for &(idx, t) in &taps {
                    out[idx] += t * s;
                }
            }
        }
    }
    out
}

/// Rescales relevance to `[0, 1]` by its maximum. An all-zero map stays zero.
pub fn normalize_map(map: &AttributionMap) -> Tensor {
    let max = map.relevance.max();
    if max > 0.0 {
        map.relevance.map(|v| v / max)
    } else {
        Tensor::zeros(map.relevance.shape())
    }
}
