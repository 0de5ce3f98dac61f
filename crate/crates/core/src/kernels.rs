//! Numeric kernels: convolution, pooling, dense, activations and their
//! backward counterparts.
//!
//! Storage is `f32`; every reduction (dot products, convolution sums) runs
//! in `f64` and is rounded once on the way out. Convolution is
//! cross-correlation with zero padding, lowered to a GEMM over an im2col
//! buffer.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Geometry of a 2-D convolution over a `[C, H, W]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernels: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 3 {
            return Err(Error::Shape(format!("conv input must be [C,H,W], got {input:?}")));
        }
        if kernels.len() != 4 {
            return Err(Error::Shape(format!(
                "conv kernels must be [C_out,C_in,kH,kW], got {kernels:?}"
            )));
        }
        if input[0] != kernels[1] {
            return Err(Error::Shape(format!(
                "input has {} channels but kernels expect {}",
                input[0], kernels[1]
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        let geom = ConvGeom {
            in_channels: input[0],
            height: input[1],
            width: input[2],
            out_channels: kernels[0],
            kernel_h: kernels[2],
            kernel_w: kernels[3],
            stride,
            padding,
        };
        if geom.kernel_h > geom.height + 2 * padding || geom.kernel_w > geom.width + 2 * padding {
            return Err(Error::Shape(format!(
                "kernel {}x{} larger than padded input {}x{}",
                geom.kernel_h,
                geom.kernel_w,
                geom.height + 2 * padding,
                geom.width + 2 * padding
            )));
        }
        Ok(geom)
    }

    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    /// Rows of the im2col matrix.
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn out_shape(&self) -> [usize; 3] {
        [self.out_channels, self.out_h(), self.out_w()]
    }

    /// Calls `f(col_row, first_position, first_input_index, run_len)` for
    /// every horizontal run of in-bounds taps. Within a run, consecutive
    /// positions read input indices `stride` apart.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let pad = self.padding;
        for c in 0..self.in_channels {
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    // valid ox: 0 <= ox*stride + kx - pad < width
                    let ox_lo = pad.saturating_sub(kx).div_ceil(self.stride);
                    let ox_hi = if self.width + pad > kx {
                        ((self.width + pad - kx - 1) / self.stride + 1).min(ow)
                    } else {
                        0
                    };
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = oy * self.stride + ky;
                        if iy < pad || iy - pad >= self.height {
                            continue;
                        }
                        let base = (c * self.height + iy - pad) * self.width;
                        let ix0 = ox_lo * self.stride + kx - pad;
                        f(row, oy * ow + ox_lo, base + ix0, ox_hi - ox_lo);
                    }
                }
            }
        }
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let p = self.positions();
        let stride = self.stride;
        let mut cols = vec![0.0; self.patch_len() * p];
        self.for_each_run(|row, pos, idx, len| {
            let dst = &mut cols[row * p + pos..row * p + pos + len];
            if stride == 1 {
                dst.copy_from_slice(&input[idx..idx + len]);
            } else {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = input[idx + j * stride];
                }
            }
        });
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let p = self.positions();
        let stride = self.stride;
        let mut out = vec![0.0; self.in_channels * self.height * self.width];
        self.for_each_run(|row, pos, idx, len| {
            let src = &cols[row * p + pos..row * p + pos + len];
            for (j, &v) in src.iter().enumerate() {
                out[idx + j * stride] += v;
            }
        });
        out
    }
}

/// `c = a · b` for row-major `a: m×k` and `b: k×n`, with
/// optional transposition given as explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the strides can reach:
    // both stride layouts used in this module address exactly m*k, k*n and
    // m*n elements respectively.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn to_f64(values: &[f32]) -> Vec<f64> {
    values.iter().map(|&v| v as f64).collect()
}

pub(crate) fn to_f32(values: &[f64]) -> Vec<f32> {
    values.iter().map(|&v| v as f32).collect()
}

/// Convolution in `f64` without bias. `kernels` is `[C_out, C_in·kH·kW]` row-major.
pub(crate) fn conv_f64(geom: &ConvGeom, input: &[f64], kernels: &[f64]) -> Vec<f64> {
    let k = geom.patch_len();
    let p = geom.positions();
    let cols = geom.im2col(input);
    let mut out = vec![0.0; geom.out_channels * p];
    gemm(
        geom.out_channels,
        k,
        p,
        kernels,
        (k as isize, 1),
        &cols,
        (p as isize, 1),
        &mut out,
    );
    out
}

/// Transposed convolution: scatters an output-space map back onto the
/// input grid through `kernels`. This is the input gradient of [`conv_f64`].
pub(crate) fn conv_transpose_f64(geom: &ConvGeom, out_map: &[f64], kernels: &[f64]) -> Vec<f64> {
    let k = geom.patch_len();
    let p = geom.positions();
    let mut cols = vec![0.0; k * p];
    // kernelsᵀ (k × C_out) · out_map (C_out × p)
    gemm(
        k,
        geom.out_channels,
        p,
        kernels,
        (1, k as isize),
        out_map,
        (p as isize, 1),
        &mut cols,
    );
    geom.col2im(&cols)
}

pub fn conv2d_forward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let geom = ConvGeom::new(input.shape(), kernels.shape(), stride, padding)?;
    if bias.shape() != [geom.out_channels] {
        return Err(Error::Shape(format!(
            "conv bias must be [{}], got {:?}",
            geom.out_channels,
            bias.shape()
        )));
    }
    let mut out = conv_f64(&geom, &to_f64(input.data()), &to_f64(kernels.data()));
    let p = geom.positions();
    for (o, &b) in bias.data().iter().enumerate() {
        for v in &mut out[o * p..(o + 1) * p] {
            *v += b as f64;
        }
    }
    Tensor::new(geom.out_shape().to_vec(), to_f32(&out))
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<ConvGrads> {
    let geom = ConvGeom::new(input.shape(), kernels.shape(), stride, padding)?;
    if grad_out.shape() != geom.out_shape() {
        return Err(Error::Shape(format!(
            "conv upstream gradient must be {:?}, got {:?}",
            geom.out_shape(),
            grad_out.shape()
        )));
    }
    let k = geom.patch_len();
    let p = geom.positions();
    let g = to_f64(grad_out.data());
    let cols = geom.im2col(&to_f64(input.data()));

    // dK = g (C_out × p) · colsᵀ (p × k)
    let mut grad_k = vec![0.0; geom.out_channels * k];
    gemm(
        geom.out_channels,
        p,
        k,
        &g,
        (p as isize, 1),
        &cols,
        (1, p as isize),
        &mut grad_k,
    );
    let grad_b: Vec<f64> = g.chunks(p).map(|row| row.iter().sum()).collect();
    let grad_in = conv_transpose_f64(&geom, &g, &to_f64(kernels.data()));

    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), to_f32(&grad_in))?,
        kernels: Tensor::new(kernels.shape().to_vec(), to_f32(&grad_k))?,
        bias: Tensor::new(vec![geom.out_channels], to_f32(&grad_b))?,
    })
}

/// Non-overlapping max pooling. Returns the pooled map and, per output
/// element, the flat input index of the winning value. Ties go to the
/// lowest flat index.
pub fn maxpool2d(input: &Tensor, window: usize) -> Result<(Tensor, Vec<usize>)> {
    input.expect_rank(3, "maxpool input")?;
    if window == 0 {
        return Err(Error::InvalidArgument("pool window must be >= 1".into()));
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if h % window != 0 || w % window != 0 {
        return Err(Error::Shape(format!(
            "pool window {window} does not divide {h}x{w}"
        )));
    }
    let (oh, ow) = (h / window, w / window);
    let data = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (ch * h + oy * window) * w + ox * window;
                for dy in 0..window {
                    let row = (ch * h + oy * window + dy) * w + ox * window;
                    for idx in row..row + window {
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, arg))
}

pub fn maxpool_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::MissingCache(format!(
            "maxpool argmax map has {} entries, upstream gradient has {}",
            argmax.len(),
            grad_out.len()
        )));
    }
    let mut grad = Tensor::zeros(input_shape);
    let g = grad.data_mut();
    for (&idx, &v) in argmax.iter().zip(grad_out.data()) {
        let slot = g.get_mut(idx).ok_or_else(|| {
            Error::MissingCache(format!("argmax index {idx} outside input {input_shape:?}"))
        })?;
        *slot += v;
    }
    Ok(grad)
}

fn check_dense(input_len: usize, weights: &Tensor) -> Result<(usize, usize)> {
    weights.expect_rank(2, "dense weights")?;
    let (m, n) = (weights.shape()[0], weights.shape()[1]);
    if n != input_len {
        return Err(Error::Shape(format!(
            "dense weights {:?} do not accept {input_len} inputs",
            weights.shape()
        )));
    }
    Ok((m, n))
}

pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = check_dense(input.len(), weights)?;
    if bias.shape() != [m] {
        return Err(Error::Shape(format!("dense bias must be [{m}], got {:?}", bias.shape())));
    }
    let x = input.data();
    let out = weights
        .data()
        .chunks_exact(n)
        .zip(bias.data())
        .map(|(row, &b)| (dot_f64(row, x) + b as f64) as f32)
        .collect();
    Tensor::new(vec![m], out)
}

/// `f64` dot product of two `f32` slices, accumulated in eight lanes.
pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    const LANES: usize = 8;
    let mut acc = [0.0f64; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum();
    for (xa, xb) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += xa[l] as f64 * xb[l] as f64;
        }
    }
    acc.iter().sum::<f64>() + tail
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Gradients of a dense layer. The input gradient keeps the input's shape.
pub fn dense_backward(input: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<DenseGrads> {
    let (m, n) = check_dense(input.len(), weights)?;
    if grad_out.len() != m {
        return Err(Error::Shape(format!(
            "dense upstream gradient must have {m} entries, got {}",
            grad_out.len()
        )));
    }
    let x = input.data();
    let g = grad_out.data();
    let mut grad_in = vec![0.0f64; n];
    let mut grad_w = Vec::with_capacity(m * n);
    for (row, &gj) in weights.data().chunks_exact(n).zip(g) {
        let gj = gj as f64;
        for (i, (&w, &xi)) in row.iter().zip(x).enumerate() {
            grad_in[i] += w as f64 * gj;
            grad_w.push((gj * xi as f64) as f32);
        }
    }
    Ok(DenseGrads {
        input: Tensor::new(input.shape().to_vec(), to_f32(&grad_in))?,
        weights: Tensor::new(vec![m, n], grad_w)?,
        bias: Tensor::new(vec![m], g.to_vec())?,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| if x > 0.0 { x } else { 0.0 })
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(Error::Shape(format!(
            "relu gradient shape {:?} != input shape {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Numerically stable softmax. Probabilities are returned in `f64` so the
/// unit-sum contract holds to ~1e-15; callers round to `f32` for storage.
pub fn softmax(logits: &Tensor) -> Vec<f64> {
    let max = logits.data().iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|&v| (v as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Gradient of cross-entropy w.r.t. the logits: `probs − one_hot(label)`.
pub fn softmax_cross_entropy_grad(probs: &[f64], label: usize) -> Result<Tensor> {
    if label >= probs.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    let grad = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| (if i == label { p - 1.0 } else { p }) as f32)
        .collect();
    Ok(Tensor::vector(grad))
}

/// Cross-entropy of a probability vector against a label, floored to avoid `ln 0`.
pub fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    let p = probs[label];
    if p.is_nan() {
        return f64::NAN;
    }
    -p.max(1e-300).ln()
}
