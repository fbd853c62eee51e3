//! VAE-WGAN: a variational autoencoder trained against a frozen perceptual
//! network and a weight-clipped Wasserstein critic, with latent-space tools
//! and attribute evaluation.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
#[cfg(test)]
mod fixtures;
pub mod latent;
pub mod losses;
pub mod models;
pub mod nn;
pub mod pretrain;
pub mod synth;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{AttributeTable, Dataset, PreprocessSpec};
pub use error::{Error, Result};
pub use eval::{LinearClassifier, MultiViewExtractor, ScoreClassifier};
pub use latent::{AttributeVector, EmbedMethod, Embedding2D};
pub use losses::{AdversarialMode, FeatureWeighting, LossReport, LossWeights};
pub use models::{
    Decoder, Discriminator, Encoder, FeatureStack, ImageBatch, LatentCode, LatentDistribution, ModelConfig,
    PerceptualNet, Tap,
};
pub use trainer::{Objective, RunOptions, StepReport, TrainConfig, Trainer};
