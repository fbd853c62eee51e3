//! Small shared configurations for unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::models::{ImageBatch, ModelConfig, PerceptualNet};
use crate::synth::shapes_corpus;
use crate::trainer::TrainConfig;

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        latent_dim: 8,
        encoder_widths: vec![4, 8],
        decoder_widths: vec![8, 4],
        disc_widths: vec![4, 8],
        perceptual_widths: vec![4, 8, 8, 8, 8],
        ..ModelConfig::default()
    }
}

pub fn tiny_train() -> TrainConfig {
    TrainConfig { batch_size: 8, epochs: 2, seed: 7, ..TrainConfig::default() }
}

pub fn tiny_perceptual(cfg: &ModelConfig) -> PerceptualNet {
    PerceptualNet::new(cfg, 4, &mut ChaCha8Rng::seed_from_u64(11)).unwrap()
}

pub fn tiny_images(n: usize) -> ImageBatch {
    shapes_corpus(n, 32, 13).0
}
