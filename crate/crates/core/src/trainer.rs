//! Minibatch SGD with momentum, geometric augmentation and evaluation.

use std::io::Write;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::network::{self, ForwardMode, ModelConfig, WeightSet};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Magnitude bound for every augmentation transform, as a fraction.
    pub augmentation_limit: f64,
    pub horizontal_flip: bool,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 45,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 16,
            seed: 0,
            augmentation_limit: 0.10,
            horizontal_flip: true,
            validation_fraction: 0.10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be a non-negative finite number");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.augmentation_limit) {
            return bad("augmentation_limit must be in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must be in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {} classes",
                class_names.len()
            )));
        }
        Ok(LabeledDataset {
            images,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    /// `None` when no validation split was held out.
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// CSV with header `epoch,loss,train_acc,val_acc`; `val_acc` is blank
    /// when there is no validation split.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "epoch,loss,train_acc,val_acc")?;
        for r in &self.epochs {
            let val = r.val_accuracy.map(crate::format::sig6).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{}",
                r.epoch,
                crate::format::sig6(r.loss),
                crate::format::sig6(r.train_accuracy),
                val
            )?;
        }
        Ok(())
    }
}

/// Parameters of one geometric augmentation. The identity is
/// `AffineParams::default()`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AffineParams {
    pub rotation_deg: f64,
    /// Pixels; positive moves content right.
    pub shift_x: f64,
    /// Pixels; positive moves content down.
    pub shift_y: f64,
    /// Horizontal shear factor.
    pub shear: f64,
    /// Zoom offset; the scale factor is `1 + zoom`.
    pub zoom: f64,
    pub flip: bool,
}

impl AffineParams {
    /// Draws every transform independently within ±`limit` of its scale:
    /// rotation ±limit·90°, shifts ±limit·dimension, shear ±limit, zoom
    /// 1±limit, plus a fair-coin horizontal flip when `allow_flip`.
    pub fn sample<R: rand::RngCore>(rng: &mut R, limit: f64, height: usize, width: usize, allow_flip: bool) -> Self {
        let rotation_deg = rng::symmetric_f64(rng) * limit * 90.0;
        let shift_x = rng::symmetric_f64(rng) * limit * width as f64;
        let shift_y = rng::symmetric_f64(rng) * limit * height as f64;
        let shear = rng::symmetric_f64(rng) * limit;
        let zoom = rng::symmetric_f64(rng) * limit;
        let flip_draw = rng::unit_f64(rng) < 0.5;
        AffineParams {
            rotation_deg,
            shift_x,
            shift_y,
            shear,
            zoom,
            flip: allow_flip && flip_draw,
        }
    }
}

/// Applies `params` to every channel of a `[C,H,W]` image with
/// nearest-neighbour resampling about the image centre. Samples falling
/// outside the source are 0.
pub fn apply_affine(image: &Tensor, params: &AffineParams) -> Result<Tensor> {
    image.expect_rank(3, "augment input")?;
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);

    // Forward map: p' = R·Sh·Z·(flip(p) − c) + c + t. We invert it per output pixel.
    let theta = params.rotation_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let s = 1.0 + params.zoom;
    // M = R · Sh · Z with Sh = [[1, shear], [0, 1]], Z = s·I
    let m = [
        [cos * s, (cos * params.shear - sin) * s],
        [sin * s, (sin * params.shear + cos) * s],
    ];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];

    let src = image.data();
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx - params.shift_x;
            let dy = y as f64 - cy - params.shift_y;
            let mut sx = inv[0][0] * dx + inv[0][1] * dy + cx;
            let sy = inv[1][0] * dx + inv[1][1] * dy + cy;
            if params.flip {
                sx = w as f64 - 1.0 - sx;
            }
            let (ix, iy) = (sx.round(), sy.round());
            if ix < 0.0 || iy < 0.0 || ix >= w as f64 || iy >= h as f64 {
                continue;
            }
            let (ix, iy) = (ix as usize, iy as usize);
            for ch in 0..c {
                out[(ch * h + y) * w + x] = src[(ch * h + iy) * w + ix];
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Random augmentation with every transform bounded by `limit`.
pub fn augment<R: rand::RngCore>(image: &Tensor, rng: &mut R, limit: f64) -> Result<Tensor> {
    image.expect_rank(3, "augment input")?;
    let params = AffineParams::sample(rng, limit, image.shape()[1], image.shape()[2], true);
    apply_affine(image, &params)
}

/// Deterministic per-class split: the first `floor(fraction·n_c)` members
/// of each class (in dataset order after a seeded shuffle) form the
/// validation set.
fn validation_split(data: &LabeledDataset, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..data.len()).collect();
    shuffle(&mut order, rng::derive_seed(seed, &[0x5A11]));
    let counts = data.class_counts();
    let quota: Vec<usize> = counts.iter().map(|&n| (fraction * n as f64).floor() as usize).collect();
    let mut taken = vec![0; counts.len()];
    let (mut fit, mut val) = (Vec::new(), Vec::new());
    for i in order {
        let l = data.labels[i];
        if taken[l] < quota[l] {
            taken[l] += 1;
            val.push(i);
        } else {
            fit.push(i);
        }
    }
    fit.sort_unstable();
    val.sort_unstable();
    (fit, val)
}

fn shuffle(items: &mut [usize], seed: u64) {
    let mut r = rng::stream(seed, 0);
    for i in (1..items.len()).rev() {
        let j = (rand::RngCore::next_u64(&mut r) % (i as u64 + 1)) as usize;
        items.swap(i, j);
    }
}

pub fn train(config: &ModelConfig, data: &LabeledDataset, tc: &TrainConfig) -> Result<(WeightSet, TrainHistory)> {
    train_with(config, data, tc, Execution::default())
}

/// Training with an explicit execution policy. Per-sample gradients may be
/// computed in parallel; they are always reduced in sample order.
pub fn train_with(
    config: &ModelConfig,
    data: &LabeledDataset,
    tc: &TrainConfig,
    exec: Execution,
) -> Result<(WeightSet, TrainHistory)> {
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if data.class_names != config.class_names() {
        return Err(Error::InvalidArgument(
            "dataset classes do not match the model's classes".into(),
        ));
    }
    let (fit, val) = validation_split(data, tc.validation_fraction, tc.seed);
    let mut fit_counts = vec![0; data.class_names.len()];
    for &i in &fit {
        fit_counts[data.labels[i]] += 1;
    }
    if let Some(c) = fit_counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass(data.class_names[c].clone()));
    }

    let mut weights = WeightSet::init(config, tc.seed);
    let mut velocity = WeightSet::zeros(config);
    let mut history = TrainHistory::default();
    let [_, h, w] = config.input_shape();

    for epoch in 0..tc.epochs {
        let mut order = fit.clone();
        shuffle(&mut order, rng::derive_seed(tc.seed, &[1, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut correct = 0usize;

        for (batch_no, batch) in order.chunks(tc.batch_size).enumerate() {
            let results = exec.try_map_range(batch.len(), |k| {
                let idx = batch[k];
                let key = rng::derive_seed(tc.seed, &[2, epoch as u64, idx as u64]);
                let mut r = rng::stream(key, 0);
                let params = AffineParams::sample(&mut r, tc.augmentation_limit, h, w, tc.horizontal_flip);
                let image = apply_affine(&data.images[idx], &params)?;
                let mode = ForwardMode::Stochastic {
                    seed: rng::derive_seed(key, &[3]),
                };
                network::loss_and_gradients(config, &weights, &image, data.labels[idx], mode)
            })?;

            let scale = 1.0 / batch.len() as f32;
            let mut grad = WeightSet::zeros(config);
            let mut batch_loss = 0.0;
            for ((loss, probs, g), &idx) in results.iter().zip(batch) {
                batch_loss += loss;
                if probs.argmax() == data.labels[idx] {
                    correct += 1;
                }
                for (acc, gi) in grad.tensors_mut().zip(g.tensors()) {
                    for (a, &v) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += v;
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            loss_sum += batch_loss;

            let lr = tc.learning_rate as f32;
            let mu = tc.momentum as f32;
            for ((p, v), g) in weights.tensors_mut().zip(velocity.tensors_mut()).zip(grad.tensors()) {
                for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vi = mu * *vi - lr * gi * scale;
                    *pi += *vi;
                }
            }
        }

        let val_accuracy = if val.is_empty() {
            None
        } else {
            Some(evaluate_with(config, &weights, &data.subset(&val), exec)?.0)
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / fit.len() as f64,
            train_accuracy: correct as f64 / fit.len() as f64,
            val_accuracy,
        };
        log::info!(
            "epoch {} loss {:.4} train_acc {:.3} val_acc {:?}",
            record.epoch,
            record.loss,
            record.train_accuracy,
            record.val_accuracy
        );
        history.epochs.push(record);
    }
    Ok((weights, history))
}

/// Deterministic-forward accuracy and argmax predictions (ties → lowest class).
pub fn evaluate(config: &ModelConfig, weights: &WeightSet, data: &LabeledDataset) -> Result<(f64, Vec<usize>)> {
    evaluate_with(config, weights, data, Execution::default())
}

pub fn evaluate_with(
    config: &ModelConfig,
    weights: &WeightSet,
    data: &LabeledDataset,
    exec: Execution,
) -> Result<(f64, Vec<usize>)> {
    let predictions = exec.try_map_range(data.len(), |i| {
        network::predict(config, weights, &data.images[i], ForwardMode::Deterministic).map(|p| p.argmax())
    })?;
    let correct = predictions.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    let accuracy = if data.is_empty() {
        0.0
    } else {
        correct as f64 / data.len() as f64
    };
    Ok((accuracy, predictions))
}
