//! Procedural five-class grayscale images with an ambiguity knob.
//!
//! Every class is a fixed motif around a bright horizontal band:
//! `amd` band with bumps above it, `csr` grey layer with a central dark blob,
//! `dr` scattered speckles, `mh` band with a central gap, `normal` the smooth
//! band alone. Ambiguous images are a 50/50 blend with another class's motif
//! but keep their own label.

use rand::RngCore;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::rng;
use crate::tensor::Tensor;
use crate::trainer::LabeledDataset;

pub const NUM_CLASSES: usize = 5;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["amd", "csr", "dr", "mh", "normal"];
pub const MIN_CLASS_COUNT: usize = 5;

const BAND_CENTER: f64 = 0.62;
const BAND_HALF_WIDTH: f64 = 0.06;
const BAND_PEAK: f64 = 0.9;

/// Fixed speckle centres `(u, v)` for the `dr` motif.
const SPECKLES: [(f64, f64); 14] = [
    (0.12, 0.30),
    (0.27, 0.22),
    (0.41, 0.35),
    (0.58, 0.26),
    (0.73, 0.33),
    (0.88, 0.24),
    (0.20, 0.44),
    (0.50, 0.46),
    (0.80, 0.45),
    (0.34, 0.80),
    (0.66, 0.84),
    (0.15, 0.86),
    (0.90, 0.78),
    (0.05, 0.12),
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub image_size: usize,
    pub class_counts: [usize; NUM_CLASSES],
    pub noise_sigma: f64,
    pub ambiguous_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            image_size: 64,
            class_counts: [20, 25, 40, 50, 90],
            noise_sigma: 0.05,
            ambiguous_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::InvalidArgument(format!(
                "image size {} too small (minimum 8)",
                self.image_size
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise sigma {} must be >= 0", self.noise_sigma)));
        }
        if !(0.0..=1.0).contains(&self.ambiguous_fraction) {
            return Err(Error::InvalidArgument(format!(
                "ambiguous fraction {} outside [0, 1]",
                self.ambiguous_fraction
            )));
        }
        Ok(())
    }

    pub fn class_names() -> Vec<String> {
        CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    }
}

fn band(v: f64) -> f64 {
    let d = (v - BAND_CENTER).abs();
    if d >= BAND_HALF_WIDTH {
        0.0
    } else {
        let c = (std::f64::consts::FRAC_PI_2 * d / BAND_HALF_WIDTH).cos();
        BAND_PEAK * c * c
    }
}

fn bump(u: f64, v: f64, cu: f64, cv: f64, sigma: f64) -> f64 {
    let d2 = (u - cu).powi(2) + (v - cv).powi(2);
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Noise-free motif value at normalised coordinates `(u, v)`.
fn motif_value(class_id: usize, u: f64, v: f64) -> f64 {
    let b = band(v);
    match class_id {
        0 => {
            let bumps = [0.3, 0.5, 0.7]
                .iter()
                .map(|&cu| 0.85 * bump(u, v, cu, BAND_CENTER - 0.08, 0.04))
                .fold(0.0, f64::max);
            b.max(bumps)
        }
        1 => {
            let layer = if (0.30..0.56).contains(&v) { 0.4 } else { 0.0 };
            let e = ((u - 0.5) / 0.2).powi(2) + ((v - 0.43) / 0.1).powi(2);
            let tissue = if e <= 1.0 { 0.0 } else { layer };
            b.max(tissue)
        }
        2 => {
            let speckle = SPECKLES
                .iter()
                .map(|&(cu, cv)| bump(u, v, cu, cv, 0.025))
                .fold(0.0, f64::max);
            b.max(0.95 * speckle)
        }
        3 => {
            if (u - 0.5).abs() < 0.1 {
                0.0
            } else {
                b
            }
        }
        _ => b,
    }
}

/// Noise-free motif of `class_id` as a `[1, S, S]` image.
pub fn motif(class_id: usize, size: usize) -> Tensor {
    assert!(class_id < NUM_CLASSES, "class id {class_id} out of range");
    let s = size as f64;
    Tensor::from_fn(&[1, size, size], |i| {
        let (y, x) = (i / size, i % size);
        motif_value(class_id, (x as f64 + 0.5) / s, (y as f64 + 0.5) / s) as f32
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub image: Tensor,
    /// Class blended in, when the image is ambiguous.
    pub blended_with: Option<usize>,
}

impl SynthImage {
    pub fn is_ambiguous(&self) -> bool {
        self.blended_with.is_some()
    }
}

/// One image of `class_id`. Draw order: ambiguity, blend partner, then
/// per-pixel noise in raster order.
pub fn generate<R: RngCore>(class_id: usize, spec: &SynthSpec, rng: &mut R) -> Result<SynthImage> {
    if class_id >= NUM_CLASSES {
        return Err(Error::InvalidArgument(format!("class id {class_id} out of range")));
    }
    spec.validate()?;
    let mut image = motif(class_id, spec.image_size);
    let blended_with = if rng::unit_f64(rng) < spec.ambiguous_fraction {
        let k = (rng::unit_f64(rng) * (NUM_CLASSES - 1) as f64) as usize;
        let other = if k >= class_id { k + 1 } else { k };
        let partner = motif(other, spec.image_size);
        for (a, &b) in image.data_mut().iter_mut().zip(partner.data()) {
            *a = 0.5 * *a + 0.5 * b;
        }
        Some(other)
    } else {
        None
    };
    for p in image.data_mut() {
        let noisy = *p as f64 + spec.noise_sigma * rng::normal_f64(rng);
        *p = noisy.clamp(0.0, 1.0) as f32;
    }
    Ok(SynthImage { image, blended_with })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub train_ambiguous: Vec<bool>,
    pub test_ambiguous: Vec<bool>,
    /// Generation index of every train / test member.
    pub train_members: Vec<usize>,
    pub test_members: Vec<usize>,
}

/// Test share per class: `floor(0.2 · n)`, at least one.
pub fn test_count(n: usize) -> usize {
    (n / 5).max(1)
}

pub fn generate_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    generate_dataset_with(spec, Execution::default())
}

/// Images are generated in class-major order; image `i` draws from seed `seed ^ i`.
/// The last `test_count(n_c)` images of each class form the test set.
pub fn generate_dataset_with(spec: &SynthSpec, exec: Execution) -> Result<SynthDataset> {
    spec.validate()?;
    if let Some((c, &n)) = spec.class_counts.iter().enumerate().find(|(_, &n)| n < MIN_CLASS_COUNT) {
        return Err(Error::InvalidArgument(format!(
            "class `{}` has {n} images; at least {MIN_CLASS_COUNT} required",
            CLASS_NAMES[c]
        )));
    }
    let labels: Vec<usize> = spec
        .class_counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    let images = exec.try_map_range(labels.len(), |i| {
        let mut r = rng::stream(spec.seed ^ i as u64, 0);
        generate(labels[i], spec, &mut r)
    })?;

    let mut train_members = Vec::new();
    let mut test_members = Vec::new();
    let mut start = 0;
    for &n in &spec.class_counts {
        let cut = start + n - test_count(n);
        train_members.extend(start..cut);
        test_members.extend(cut..start + n);
        start += n;
    }
    let build = |members: &[usize]| -> Result<(LabeledDataset, Vec<bool>)> {
        let data = LabeledDataset::new(
            members.iter().map(|&i| images[i].image.clone()).collect(),
            members.iter().map(|&i| labels[i]).collect(),
            SynthSpec::class_names(),
        )?;
        Ok((data, members.iter().map(|&i| images[i].is_ambiguous()).collect()))
    };
    let (train, train_ambiguous) = build(&train_members)?;
    let (test, test_ambiguous) = build(&test_members)?;
    Ok(SynthDataset {
        train,
        test,
        train_ambiguous,
        test_ambiguous,
        train_members,
        test_members,
    })
}
