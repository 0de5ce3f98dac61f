//! Monte Carlo dropout: repeated dropout-active forward passes and the
//! statistics of the resulting predictive distribution.
//!
//! Pass `t` always runs with seed `base_seed ^ t`, so a sample is identical
//! whether its passes run sequentially or spread over a worker pool.

use std::io::Write;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::format::sig6;
use crate::network::{self, ForwardMode, ModelConfig, WeightSet};
use crate::rng;
use crate::tensor::{argmax, Tensor};

pub const DEFAULT_PASSES: usize = 1000;
pub const DEFAULT_BINS: usize = 50;

/// `passes × classes` softmax outputs, one row per stochastic pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSample {
    probs: Vec<f32>,
    passes: usize,
    classes: usize,
    pub base_seed: u64,
}

impl PredictiveSample {
    /// Builds a sample from explicit rows. Every row must have the same length.
    pub fn from_rows(rows: Vec<Vec<f32>>, base_seed: u64) -> Result<Self> {
        let passes = rows.len();
        if passes == 0 {
            return Err(Error::InvalidArgument("a predictive sample needs at least one pass".into()));
        }
        let classes = rows[0].len();
        if classes == 0 || rows.iter().any(|r| r.len() != classes) {
            return Err(Error::Shape("ragged or empty predictive sample rows".into()));
        }
        Ok(PredictiveSample {
            probs: rows.into_iter().flatten().collect(),
            passes,
            classes,
            base_seed,
        })
    }

    pub fn passes(&self) -> usize {
        self.passes
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.probs[t * self.classes..(t + 1) * self.classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.probs.chunks_exact(self.classes)
    }

    pub fn column(&self, class: usize) -> Vec<f32> {
        self.rows().map(|r| r[class]).collect()
    }

    /// Mean probability vector over passes.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.classes];
        for row in self.rows() {
            for (acc, &p) in m.iter_mut().zip(row) {
                *acc += p as f64;
            }
        }
        m.iter().map(|v| v / self.passes as f64).collect()
    }

    /// CSV `pass_index,class_name,probability`, row-major over passes.
    pub fn write_csv(&self, class_names: &[String], mut w: impl Write) -> Result<()> {
        check_names(class_names, self.classes)?;
        writeln!(w, "pass_index,class_name,probability")?;
        for (t, row) in self.rows().enumerate() {
            for (name, &p) in class_names.iter().zip(row) {
                writeln!(w, "{t},{name},{}", sig6(p as f64))?;
            }
        }
        Ok(())
    }
}

fn check_names(class_names: &[String], classes: usize) -> Result<()> {
    if class_names.len() != classes {
        return Err(Error::InvalidArgument(format!(
            "{} class names for {classes} classes",
            class_names.len()
        )));
    }
    Ok(())
}

/// Per-class statistics of a [`PredictiveSample`].
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSummary {
    pub median: Vec<f64>,
    pub p10: Vec<f64>,
    pub p90: Vec<f64>,
    /// Argmax of the per-class medians, ties to the lowest index.
    pub predicted_class: usize,
    /// Median probability of the predicted class.
    pub confidence: f64,
}

/// Nearest-rank percentile of an ascending-sorted slice:
/// index `ceil(pct/100 · n) − 1`, clamped to `[0, n − 1]`.
pub fn nearest_rank<T: Copy>(sorted: &[T], percentile: f64) -> T {
    let n = sorted.len();
    // pct·n first: exact for integral percentiles, unlike (pct/100)·n.
    let rank = (percentile * n as f64 / 100.0).ceil() as usize;
    sorted[rank.saturating_sub(1).min(n - 1)]
}

/// Lower median: element `floor((n − 1)/2)` of the sorted values.
pub fn lower_median<T: Copy>(sorted: &[T]) -> T {
    sorted[(sorted.len() - 1) / 2]
}

pub fn summarize(sample: &PredictiveSample) -> PredictiveSummary {
    let mut median = Vec::with_capacity(sample.classes);
    let mut p10 = Vec::with_capacity(sample.classes);
    let mut p90 = Vec::with_capacity(sample.classes);
    for c in 0..sample.classes {
        let mut col = sample.column(c);
        col.sort_by(f32::total_cmp);
        median.push(lower_median(&col) as f64);
        p10.push(nearest_rank(&col, 10.0) as f64);
        p90.push(nearest_rank(&col, 90.0) as f64);
    }
    let predicted_class = argmax(&median);
    PredictiveSummary {
        confidence: median[predicted_class],
        median,
        p10,
        p90,
        predicted_class,
    }
}

pub fn mc_predict(
    config: &ModelConfig,
    weights: &WeightSet,
    image: &Tensor,
    passes: usize,
    base_seed: u64,
) -> Result<PredictiveSample> {
    mc_predict_with(config, weights, image, passes, base_seed, Execution::default())
}

pub fn mc_predict_with(
    config: &ModelConfig,
    weights: &WeightSet,
    image: &Tensor,
    passes: usize,
    base_seed: u64,
    exec: Execution,
) -> Result<PredictiveSample> {
    check_passes(config, passes)?;
    sample_passes(config, weights, image, passes, base_seed, exec)
}

fn check_passes(config: &ModelConfig, passes: usize) -> Result<()> {
    if passes == 0 {
        return Err(Error::InvalidArgument("pass count T must be positive".into()));
    }
    if config.dropout_count() == 0 {
        log::warn!("model has no dropout layer; every MC pass equals the deterministic forward");
    }
    Ok(())
}

fn sample_passes(
    config: &ModelConfig,
    weights: &WeightSet,
    image: &Tensor,
    passes: usize,
    base_seed: u64,
    exec: Execution,
) -> Result<PredictiveSample> {
    // Layers ahead of the first active dropout are identical in every pass.
    let prefix = network::shared_prefix(config, weights, image)?;
    let rows = exec.try_map_range(passes, |t| {
        let mode = ForwardMode::Stochastic {
            seed: base_seed ^ t as u64,
        };
        network::predict_from(config, weights, &prefix, mode).map(|p| p.into_data())
    })?;
    PredictiveSample::from_rows(rows, base_seed)
}

/// Base seed of image `index` in a dataset-wide MC run.
pub fn image_seed(seed: u64, index: usize) -> u64 {
    rng::derive_seed(seed, &[index as u64])
}

/// Summaries for every image, image `i` sampled with [`image_seed`]`(seed, i)`.
/// Images are spread over the pool; each image's passes run in order.
pub fn summarize_dataset(
    config: &ModelConfig,
    weights: &WeightSet,
    images: &[Tensor],
    passes: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<PredictiveSummary>> {
    check_passes(config, passes)?;
    exec.try_map_range(images.len(), |i| {
        let sample = sample_passes(config, weights, &images[i], passes, image_seed(seed, i), Execution::Sequential)?;
        Ok(summarize(&sample))
    })
}

/// Uniform histogram of each class's probabilities over `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionHistogram {
    pub bins: usize,
    /// `counts[class][bin]`
    pub counts: Vec<Vec<usize>>,
}

impl DistributionHistogram {
    pub fn bin_edges(&self, bin: usize) -> (f64, f64) {
        (bin as f64 / self.bins as f64, (bin + 1) as f64 / self.bins as f64)
    }

    /// CSV `class_name,bin_lo,bin_hi,count`.
    pub fn write_csv(&self, class_names: &[String], mut w: impl Write) -> Result<()> {
        check_names(class_names, self.counts.len())?;
        writeln!(w, "class_name,bin_lo,bin_hi,count")?;
        for (name, counts) in class_names.iter().zip(&self.counts) {
            for (b, count) in counts.iter().enumerate() {
                let (lo, hi) = self.bin_edges(b);
                writeln!(w, "{name},{},{},{count}", sig6(lo), sig6(hi))?;
            }
        }
        Ok(())
    }
}

/// Value `v` lands in bin `floor(v · bins)`, with `v = 1.0` clamped into the last bin.
pub fn histogram(sample: &PredictiveSample, bins: usize) -> Result<DistributionHistogram> {
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    let mut counts = vec![vec![0usize; bins]; sample.classes];
    for row in sample.rows() {
        for (c, &p) in row.iter().enumerate() {
            let b = ((p as f64 * bins as f64).floor().max(0.0) as usize).min(bins - 1);
            counts[c][b] += 1;
        }
    }
    Ok(DistributionHistogram { bins, counts })
}
