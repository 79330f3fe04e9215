#![allow(dead_code)]

use latte_core::backbone::{init_params, randomize, CondMode, ModelConfig, Variant};
use latte_core::embedding::{LatentShape, PatchMode, TemporalPos, VideoLatent};
use latte_core::params::{Init, ParamStore};
use latte_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tiny model: width 8, two heads of width 4.
pub fn tiny(variant: Variant, cond: CondMode, pos: TemporalPos) -> ModelConfig {
    ModelConfig {
        variant,
        layers: 2,
        hidden: 8,
        heads: 2,
        patch_h: 1,
        patch_w: 1,
        patch_mode: PatchMode::Uniform,
        cond_mode: cond,
        temporal_pos: pos,
        frames: 4,
        latent_height: 2,
        latent_width: 2,
        latent_channels: 1,
        num_classes: None,
        mlp_ratio: 2,
    }
}

/// Store with every trainable value drawn from N(0, 0.5²).
pub fn random_store(config: &ModelConfig, seed: u64) -> ParamStore<f64> {
    let mut r = rng(seed);
    let mut store = init_params(config, &mut r).unwrap();
    randomize(&mut store, 0.5, &mut r);
    store
}

pub fn normal(shape: &[usize], seed: u64) -> Tensor<f64> {
    Init::Normal(1.0).sample(shape, &mut rng(seed))
}

pub fn latent(shape: LatentShape, seed: u64) -> VideoLatent<f64> {
    VideoLatent::new(normal(&shape.dims(), seed)).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub const ALL_VARIANTS: [Variant; 4] = [
    Variant::Interleaved,
    Variant::LateFusion,
    Variant::Sequential,
    Variant::SplitHead,
];
pub const COND_MODES: [CondMode; 2] = [CondMode::SAdaln, CondMode::AllTokens];
pub const POS_MODES: [TemporalPos; 2] = [TemporalPos::Absolute, TemporalPos::Rope];
