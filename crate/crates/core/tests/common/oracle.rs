//! Naive f64 reference network: direct loops, no im2col, no caches.
//! Used to check analytic gradients by central finite differences.

#![allow(dead_code)]

use uatriage::{LayerSpec, ModelConfig, Tensor, WeightSet};

#[derive(Clone)]
pub struct OracleNet {
    layers: Vec<LayerSpec>,
    input: [usize; 3],
    /// (weights, weight shape, bias) per parameterized layer.
    pub params: Vec<(Vec<f64>, Vec<usize>, Vec<f64>)>,
}

struct Act {
    data: Vec<f64>,
    shape: Vec<usize>,
}

impl OracleNet {
    pub fn new(config: &ModelConfig, weights: &WeightSet) -> Self {
        let params = weights
            .bundles
            .iter()
            .map(|b| {
                (
                    b.weights.data().iter().map(|&v| v as f64).collect(),
                    b.weights.shape().to_vec(),
                    b.bias.data().iter().map(|&v| v as f64).collect(),
                )
            })
            .collect();
        OracleNet {
            layers: config.layers().to_vec(),
            input: config.input_shape(),
            params,
        }
    }

    pub fn logits(&self, image: &[f64]) -> Vec<f64> {
        self.run(image, &mut Vec::new())
    }

    /// Activation pattern: the sign of every ReLU input and the winner of
    /// every pooling window. The loss is smooth while this stays fixed.
    pub fn pattern(&self, image: &[f64]) -> Vec<usize> {
        let mut pattern = Vec::new();
        self.run(image, &mut pattern);
        pattern
    }

    fn run(&self, image: &[f64], pattern: &mut Vec<usize>) -> Vec<f64> {
        let mut a = Act {
            data: image.to_vec(),
            shape: self.input.to_vec(),
        };
        let mut p = 0;
        for layer in &self.layers {
            a = match *layer {
                LayerSpec::Conv { stride, padding, .. } => {
                    let (w, ws, b) = &self.params[p];
                    p += 1;
                    conv(&a, w, ws, b, stride, padding)
                }
                LayerSpec::Dense { .. } => {
                    let (w, ws, b) = &self.params[p];
                    p += 1;
                    let n = ws[1];
                    let data = (0..ws[0])
                        .map(|o| b[o] + (0..n).map(|i| w[o * n + i] * a.data[i]).sum::<f64>())
                        .collect();
                    Act { data, shape: vec![ws[0]] }
                }
                LayerSpec::Relu => {
                    pattern.extend(a.data.iter().map(|&v| usize::from(v > 0.0)));
                    Act {
                        data: a.data.iter().map(|&v| v.max(0.0)).collect(),
                        shape: a.shape,
                    }
                }
                LayerSpec::MaxPool { window } => maxpool(&a, window, pattern),
                LayerSpec::Dropout { .. } => a,
                LayerSpec::Flatten => Act {
                    shape: vec![a.data.len()],
                    data: a.data,
                },
                LayerSpec::Softmax => break,
            };
        }
        a.data
    }

    pub fn loss(&self, image: &[f64], label: usize) -> f64 {
        let z = self.logits(image);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        lse - z[label]
    }

    pub fn param_mut(&mut self, bundle: usize, bias: bool, index: usize) -> &mut f64 {
        let p = &mut self.params[bundle];
        if bias {
            &mut p.2[index]
        } else {
            &mut p.0[index]
        }
    }

    pub fn probs(&self, image: &[f64]) -> Vec<f64> {
        let z = self.logits(image);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }
}

fn conv(a: &Act, w: &[f64], ws: &[usize], b: &[f64], stride: usize, pad: usize) -> Act {
    let (c_in, h, wd) = (a.shape[0], a.shape[1], a.shape[2]);
    let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        for y in 0..oh {
            for x in 0..ow {
                let mut s = b[o];
                for c in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (x * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            s += a.data[(c * h + iy as usize) * wd + ix as usize]
                                * w[((o * c_in + c) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(o * oh + y) * ow + x] = s;
            }
        }
    }
    Act {
        data: out,
        shape: vec![c_out, oh, ow],
    }
}

fn maxpool(a: &Act, k: usize, pattern: &mut Vec<usize>) -> Act {
    let (c, h, w) = (a.shape[0], a.shape[1], a.shape[2]);
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut m = f64::NEG_INFINITY;
                let mut arg = 0;
                for dy in 0..k {
                    for dx in 0..k {
                        let v = a.data[(ch * h + y * k + dy) * w + x * k + dx];
                        if v > m {
                            m = v;
                            arg = dy * k + dx;
                        }
                    }
                }
                pattern.push(arg);
                out.push(m);
            }
        }
    }
    Act {
        data: out,
        shape: vec![c, oh, ow],
    }
}

pub struct GradCheck {
    pub checked: usize,
    /// Parameters whose ±h perturbation changes the activation pattern.
    pub kinks: Vec<String>,
    pub failures: Vec<String>,
    pub worst_relative: f64,
}

/// Central differences of the oracle loss against the analytic gradients.
/// A kink crossing is only detected when it changes the pattern at ±h; a
/// pattern that flips and flips back inside the interval goes unnoticed.
/// Passes a parameter when the absolute error is ≤ `abs_tol` or the relative
/// error is ≤ `rel_tol`.
pub fn check_gradients(
    net: &OracleNet,
    image: &Tensor,
    label: usize,
    analytic: &WeightSet,
    h: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> GradCheck {
    let img: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();
    let mut work = net.clone();
    let base = net.pattern(&img);
    let mut out = GradCheck {
        checked: 0,
        kinks: Vec::new(),
        failures: Vec::new(),
        worst_relative: 0.0,
    };
    for (bi, bundle) in analytic.bundles.iter().enumerate() {
        for (is_bias, grads) in [(false, &bundle.weights), (true, &bundle.bias)] {
            for (k, &g) in grads.data().iter().enumerate() {
                let orig = *work.param_mut(bi, is_bias, k);
                *work.param_mut(bi, is_bias, k) = orig + h;
                let plus = work.loss(&img, label);
                let mut kink = work.pattern(&img) != base;
                *work.param_mut(bi, is_bias, k) = orig - h;
                let minus = work.loss(&img, label);
                kink |= work.pattern(&img) != base;
                *work.param_mut(bi, is_bias, k) = orig;
                let name = format!("layer {bi} {} [{k}]", if is_bias { "bias" } else { "weight" });
                if kink {
                    out.kinks.push(name.clone());
                }
                let numeric = (plus - minus) / (2.0 * h);
                let analytic = g as f64;
                let abs = (numeric - analytic).abs();
                let rel = abs / numeric.abs().max(analytic.abs());
                out.checked += 1;
                if abs > abs_tol {
                    out.worst_relative = out.worst_relative.max(rel);
                    if rel > rel_tol {
                        out.failures.push(format!("{name}: analytic {analytic:e}, numeric {numeric:e}"));
                    }
                }
            }
        }
    }
    out
}

/// Two-conv, one-dense network with random weights and biases, plus a random
/// image and label.
pub fn toy_case(seed: u64) -> (ModelConfig, WeightSet, Tensor, usize) {
    use uatriage::rng;
    let layers = vec![
        LayerSpec::conv3x3(4),
        LayerSpec::Relu,
        LayerSpec::MaxPool { window: 2 },
        LayerSpec::conv3x3(6),
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::Dense { units: 3 },
        LayerSpec::Softmax,
    ];
    let names = (0..3).map(|i| format!("k{i}")).collect();
    let config = ModelConfig::new([1, 8, 8], layers, names).unwrap();
    let mut weights = WeightSet::init(&config, seed);
    let mut r = rng::stream(seed, 100);
    for b in &mut weights.bundles {
        for v in b.bias.data_mut() {
            *v = (0.1 * rng::symmetric_f64(&mut r)) as f32;
        }
    }
    let image = Tensor::from_fn(&[1, 8, 8], |_| rng::unit_f64(&mut r) as f32);
    let label = (rng::unit_f64(&mut r) * 3.0) as usize;
    (config, weights, image, label)
}

impl GradCheck {
    /// Failures at parameters whose difference interval is smooth.
    pub fn smooth_failures(&self) -> Vec<&String> {
        self.failures
            .iter()
            .filter(|f| !self.kinks.iter().any(|k| f.starts_with(&format!("{k}:"))))
            .collect()
    }
}

/// First seed from `start` whose toy case has no kink within ±h of any parameter.
pub fn smooth_toy_case(start: u64, h: f64) -> (u64, ModelConfig, WeightSet, Tensor, usize) {
    (start..start + 1000)
        .find_map(|seed| {
            let (cfg, w, img, label) = toy_case(seed);
            let (_, _, grads) =
                uatriage::network::loss_and_gradients(&cfg, &w, &img, label, uatriage::ForwardMode::Deterministic)
                    .unwrap();
            let check = check_gradients(&OracleNet::new(&cfg, &w), &img, label, &grads, h, 1.0, f64::INFINITY);
            check.kinks.is_empty().then_some((seed, cfg, w, img, label))
        })
        .expect("no kink-free toy case in 1000 seeds")
}
