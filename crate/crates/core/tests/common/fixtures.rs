//! Shared inputs for relevance checks.

#![allow(dead_code)]

use uatriage::network::ParamBundle;
use uatriage::{rng, LayerSpec, ModelConfig, Tensor, WeightSet};

pub fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("k{i}")).collect()
}

pub fn random_image(seed: u64, shape: &[usize]) -> Tensor {
    let mut r = rng::stream(seed, 9);
    Tensor::from_fn(shape, |_| rng::unit_f64(&mut r) as f32)
}

/// conv3x3 → relu → conv3x3 → relu → flatten → dense(2), where the target
/// row of the dense layer only sees output position `(py, px)`.
pub fn probe_network(seed: u64, py: usize, px: usize) -> (ModelConfig, WeightSet) {
    let layers = vec![
        LayerSpec::conv3x3(3),
        LayerSpec::Relu,
        LayerSpec::conv3x3(1),
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::Dense { units: 2 },
        LayerSpec::Softmax,
    ];
    let cfg = ModelConfig::new([1, 9, 9], layers, names(2)).unwrap();
    let mut w = WeightSet::init(&cfg, seed);
    // Positive second-layer kernels keep the probed unit active.
    for v in w.bundles[1].weights.data_mut() {
        *v = v.abs();
    }
    let mut dense = vec![0.0f32; 2 * 81];
    dense[py * 9 + px] = 1.0;
    dense[81..].fill(0.01);
    w.bundles[2] = ParamBundle {
        weights: Tensor::new(vec![2, 81], dense).unwrap(),
        bias: Tensor::zeros(&[2]),
    };
    (cfg, w)
}

