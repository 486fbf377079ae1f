#![allow(dead_code)]

use vif_core::model::{ModelConfig, ModelParams};
use vif_core::synthgrid::{GridImage, TaskSample};
use vif_core::tensor::{Precision, Rng, Tensor};
use vif_core::vif::VifParams;

pub fn tiny_config(precision: Precision) -> ModelConfig {
    ModelConfig {
        n_symbols: 4,
        vocab_size: 8,
        max_grid_side: 3,
        d_vision: 8,
        d_model: 16,
        n_layers: 2,
        n_heads: 4,
        ffn_mult: 2,
        max_seq_len: 32,
        precision,
    }
}

pub fn tiny_model(seed: u64, precision: Precision) -> (ModelParams, VifParams) {
    let cfg = tiny_config(precision);
    let mut rng = Rng::new(seed);
    let model = ModelParams::init(&cfg, &mut rng).unwrap();
    let vif = VifParams::init(cfg.d_model, 4, true, precision, &mut rng).unwrap();
    (model, vif)
}

pub fn random_image(side: usize, n_symbols: usize, rng: &mut Rng) -> GridImage {
    GridImage::new(side, (0..side * side).map(|_| rng.below(n_symbols)).collect(), n_symbols).unwrap()
}

pub fn random_sample(side: usize, n_symbols: usize, rng: &mut Rng) -> TaskSample {
    TaskSample::new(random_image(side, n_symbols, rng))
}

pub fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, Precision::F64, rng)
}

/// Byte image of every named tensor.
pub fn snapshot(named: Vec<(String, &Tensor)>) -> Vec<(String, Vec<u64>)> {
    named.into_iter().map(|(n, t)| (n, t.data().iter().map(|x| x.to_bits()).collect())).collect()
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// f64 model, former with its norms moved off the 1/0 initialization so
/// their gradients are generic, and one 2x2 sample.
pub fn gradcheck_fixture(seed: u64, self_attn: bool) -> (ModelParams, VifParams, TaskSample) {
    let cfg = ModelConfig { max_grid_side: 2, max_seq_len: 16, ..tiny_config(Precision::F64) };
    let mut rng = Rng::new(seed);
    let model = ModelParams::init(&cfg, &mut rng).unwrap();
    let mut vif = VifParams::init(16, 4, self_attn, Precision::F64, &mut rng).unwrap();
    for t in [&mut vif.refine_gamma, &mut vif.refine_beta, &mut vif.fusion_gamma, &mut vif.fusion_beta] {
        let noise = Tensor::uniform(t.shape(), 0.3, Precision::F64, &mut rng);
        t.axpy(1.0, &noise).unwrap();
    }
    let spec = vif_core::synthgrid::TaskSpec { side: 2, n_symbols: 4, n_samples: 1 };
    let sample = vif_core::synthgrid::gen_dataset(&spec, cfg.vocab_size, seed).unwrap().remove(0);
    (model, vif, sample)
}
