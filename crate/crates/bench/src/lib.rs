//! Fixtures shared by the benchmarks under `benches/`.

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use vaewgan::{ImageBatch, ModelConfig, PerceptualNet, TrainConfig, Trainer};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in [-1, 1].
pub fn random_batch(shape: (usize, usize, usize, usize), seed: u64) -> ImageBatch {
    let u = Uniform::new_inclusive(-1.0f32, 1.0).expect("valid range");
    let mut r = rng(seed);
    Array4::from_shape_simple_fn(shape, || u.sample(&mut r))
}

/// Desk-preset trainer with an untrained (frozen) perceptual net.
pub fn desk_trainer(batch_size: usize) -> Trainer {
    let cfg = ModelConfig::desk();
    let perceptual = PerceptualNet::new(&cfg, 10, &mut rng(1)).expect("valid config");
    let train = TrainConfig {
        batch_size,
        ..TrainConfig::desk()
    };
    Trainer::new(cfg, train, perceptual).expect("valid config")
}
