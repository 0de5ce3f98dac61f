//! Binary weight file.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "UAWT" 0x01
//! u32 layer count, then per layer: u8 tag + fixed u32 params
//!     0 Conv(out_channels, kernel_size, stride, padding)
//!     1 Relu   2 MaxPool(window)   3 Dropout(rate: f32)
//!     4 Flatten   5 Dense(units)   6 Softmax
//! u32 tensor count, then per tensor: u32 rank, u32 dims..., f32 data
//! optional trailer: "META", u32 channels, u32 height, u32 width,
//!     u32 class count, per class u32 byte length + UTF-8 name
//! ```
//!
//! Files without the trailer still load; the input shape is then inferred
//! from the parameter shapes (square images assumed) and classes are named
//! `class0..`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{LayerSpec, ModelConfig, ParamBundle, WeightSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"UAWT";
pub const VERSION: u8 = 0x01;
const TRAILER: &[u8; 4] = b"META";

const TAG_CONV: u8 = 0;
const TAG_RELU: u8 = 1;
const TAG_MAXPOOL: u8 = 2;
const TAG_DROPOUT: u8 = 3;
const TAG_FLATTEN: u8 = 4;
const TAG_DENSE: u8 = 5;
const TAG_SOFTMAX: u8 = 6;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn write_weights(config: &ModelConfig, weights: &WeightSet) -> Result<Vec<u8>> {
    weights.validate(config)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);

    put_u32(&mut out, config.layers().len())?;
    for layer in config.layers() {
        match *layer {
            LayerSpec::Conv {
                out_channels,
                kernel_size,
                stride,
                padding,
            } => {
                out.push(TAG_CONV);
                for v in [out_channels, kernel_size, stride, padding] {
                    put_u32(&mut out, v)?;
                }
            }
            LayerSpec::Relu => out.push(TAG_RELU),
            LayerSpec::MaxPool { window } => {
                out.push(TAG_MAXPOOL);
                put_u32(&mut out, window)?;
            }
            LayerSpec::Dropout { rate } => {
                out.push(TAG_DROPOUT);
                out.extend_from_slice(&rate.to_le_bytes());
            }
            LayerSpec::Flatten => out.push(TAG_FLATTEN),
            LayerSpec::Dense { units } => {
                out.push(TAG_DENSE);
                put_u32(&mut out, units)?;
            }
            LayerSpec::Softmax => out.push(TAG_SOFTMAX),
        }
    }

    put_u32(&mut out, weights.bundles.len() * 2)?;
    for t in weights.tensors() {
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    out.extend_from_slice(TRAILER);
    for d in config.input_shape() {
        put_u32(&mut out, d)?;
    }
    put_u32(&mut out, config.num_classes())?;
    for name in config.class_names() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
    }
    Ok(out)
}

pub fn save_weights(config: &ModelConfig, weights: &WeightSet, path: impl AsRef<Path>) -> Result<()> {
    let bytes = write_weights(config, weights)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<(ModelConfig, WeightSet)> {
    read_weights(&fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!("{what} at byte {}", self.pos))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn read_weights(bytes: &[u8]) -> Result<(ModelConfig, WeightSet)> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("file shorter than magic".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }

    let layer_count = r.u32("layer count")?;
    let mut layers = Vec::new();
    for i in 0..layer_count {
        let tag = r.u8("layer tag")?;
        let layer = match tag {
            TAG_CONV => LayerSpec::Conv {
                out_channels: r.u32("conv params")?,
                kernel_size: r.u32("conv params")?,
                stride: r.u32("conv params")?,
                padding: r.u32("conv params")?,
            },
            TAG_RELU => LayerSpec::Relu,
            TAG_MAXPOOL => LayerSpec::MaxPool {
                window: r.u32("maxpool window")?,
            },
            TAG_DROPOUT => LayerSpec::Dropout {
                rate: r.f32("dropout rate")?,
            },
            TAG_FLATTEN => LayerSpec::Flatten,
            TAG_DENSE => LayerSpec::Dense {
                units: r.u32("dense units")?,
            },
            TAG_SOFTMAX => LayerSpec::Softmax,
            other => return Err(Error::Parse(format!("unknown layer tag {other} for layer {i}"))),
        };
        layers.push(layer);
    }

    let tensor_count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..tensor_count {
        let rank = r.u32("tensor rank")?;
        let shape = (0..rank).map(|_| r.u32("tensor dims")).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::WeightShape(format!("tensor shape {shape:?} overflows")))?;
        if len.checked_mul(4).is_none_or(|b| b > r.remaining()) {
            return Err(Error::Truncated(format!("tensor data for shape {shape:?}")));
        }
        let data = (0..len).map(|_| r.f32("tensor data")).collect::<Result<Vec<_>>>()?;
        tensors.push(Tensor::new(shape, data).map_err(|e| Error::WeightShape(e.to_string()))?);
    }
    if tensors.len() % 2 != 0 {
        return Err(Error::WeightShape(format!(
            "odd tensor count {}; expected weight/bias pairs",
            tensors.len()
        )));
    }
    let mut it = tensors.into_iter();
    let mut bundles = Vec::new();
    while let (Some(weights), Some(bias)) = (it.next(), it.next()) {
        bundles.push(ParamBundle { weights, bias });
    }
    let weights = WeightSet { bundles };

    let config = if r.remaining() == 0 {
        infer_config(layers, &weights)?
    } else {
        if r.take(4, "trailer tag")? != TRAILER {
            return Err(Error::Parse("unexpected bytes after tensors".into()));
        }
        let input = [r.u32("input shape")?, r.u32("input shape")?, r.u32("input shape")?];
        let classes = r.u32("class count")?;
        let mut names = Vec::new();
        for _ in 0..classes {
            let len = r.u32("class name length")?;
            let raw = r.take(len, "class name")?;
            names.push(
                String::from_utf8(raw.to_vec()).map_err(|_| Error::Parse("class name is not UTF-8".into()))?,
            );
        }
        if r.remaining() != 0 {
            return Err(Error::Parse(format!("{} trailing bytes", r.remaining())));
        }
        ModelConfig::new(input, layers, names).map_err(|e| Error::WeightShape(e.to_string()))?
    };
    weights.validate(&config)?;
    Ok((config, weights))
}

/// Rebuilds a config for a trailer-less file from its parameter shapes.
fn infer_config(layers: Vec<LayerSpec>, weights: &WeightSet) -> Result<ModelConfig> {
    let classes = weights
        .bundles
        .last()
        .map(|b| b.bias.len())
        .ok_or_else(|| Error::WeightShape("no parameter tensors".into()))?;
    let names: Vec<String> = (0..classes).map(|i| format!("class{i}")).collect();
    let first = &weights.bundles[0].weights;
    let candidates: Vec<[usize; 3]> = match layers.iter().find(|l| l.has_params()) {
        Some(LayerSpec::Dense { .. }) if first.rank() == 2 => vec![[1, 1, first.shape()[1]]],
        Some(LayerSpec::Conv { .. }) if first.rank() == 4 => {
            (1..=4096).map(|s| [first.shape()[1], s, s]).collect()
        }
        _ => Vec::new(),
    };
    for input in candidates {
        if let Ok(cfg) = ModelConfig::new(input, layers.clone(), names.clone()) {
            if weights.validate(&cfg).is_ok() {
                return Ok(cfg);
            }
        }
    }
    Err(Error::WeightShape(
        "parameter shapes are inconsistent with the layer specs".into(),
    ))
}
