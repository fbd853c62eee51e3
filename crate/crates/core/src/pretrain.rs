//! Supervised pretraining of the perceptual network, which then serves as the
//! frozen feature extractor and as the scoring classifier.

use std::path::Path;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use crate::data::batches;
use crate::models::{ImageBatch, ModelConfig, PerceptualNet};
use crate::nn::{Adam, Module};
use crate::synth::{shapes_corpus, SHAPE_CLASSES};
use crate::trainer::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 3, batch_size: 32, lr: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f32,
    pub accuracy: f32,
}

/// Trains `net` (must not be frozen) with softmax cross-entropy on `labels`.
pub fn pretrain(
    net: &mut PerceptualNet,
    images: &ImageBatch,
    labels: &[usize],
    cfg: &PretrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    if images.len_of(Axis(0)) != labels.len() {
        return Err(Error::Input(format!(
            "{} images but {} labels",
            images.len_of(Axis(0)),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= net.classes()) {
        return Err(Error::Input(format!("label {bad} outside 0..{}", net.classes())));
    }
    if cfg.batch_size == 0 || labels.is_empty() {
        return Err(Error::Config("pretraining needs a positive batch size and data".into()));
    }
    let mut opt = Adam::new(cfg.lr, 0.9, 0.999);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stats = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss, mut acc, mut seen) = (0.0f32, 0.0f32, 0usize);
        for batch in batches(&order, cfg.batch_size, true) {
            let x = images.select(Axis(0), batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            net.zero_grad();
            let (l, a) = net.classification_grads(&x, &y)?;
            opt.step(net.params_mut());
            loss += l * y.len() as f32;
            acc += a * y.len() as f32;
            seen += y.len();
        }
        let s = EpochStats { epoch, loss: loss / seen as f32, accuracy: acc / seen as f32 };
        log::info!("pretrain epoch {epoch}: loss {:.4} acc {:.3}", s.loss, s.accuracy);
        on_epoch(&s);
        stats.push(s);
    }
    Ok(stats)
}

/// Top-1 accuracy of the classification head.
pub fn accuracy(net: &PerceptualNet, images: &ImageBatch, labels: &[usize]) -> Result<f32> {
    let mut correct = 0usize;
    let order: Vec<usize> = (0..labels.len()).collect();
    for batch in batches(&order, 64, true) {
        let logits = net.logits(&images.select(Axis(0), batch))?;
        for (row, &i) in logits.rows().into_iter().zip(batch) {
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f32::MIN), |b, (j, &v)| if v > b.1 { (j, v) } else { b })
                .0;
            correct += (pred == labels[i]) as usize;
        }
    }
    Ok(correct as f32 / labels.len().max(1) as f32)
}

/// Builds a perceptual net for `cfg`, pretrains it on the procedural shapes
/// corpus and freezes it.
pub fn pretrained_on_shapes(cfg: &ModelConfig, samples: usize, pcfg: &PretrainConfig) -> Result<PerceptualNet> {
    let mut init = ChaCha8Rng::seed_from_u64(pcfg.seed);
    let mut net = PerceptualNet::new(cfg, SHAPE_CLASSES, &mut init)?;
    let (x, y) = shapes_corpus(samples, cfg.image_size as u32, pcfg.seed.wrapping_add(1));
    pretrain(&mut net, &x, &y, pcfg, |_| {})?;
    net.freeze();
    Ok(net)
}

/// Writes the network alone in the checkpoint container.
pub fn save_perceptual(net: &PerceptualNet, cfg: &ModelConfig, path: impl AsRef<Path>) -> Result<()> {
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            model: cfg.clone(),
            train: TrainConfig::default(),
            epoch: 0,
            step: 0,
            step_in_epoch: 0,
            perceptual_classes: net.classes(),
            noise_word_pos: "0".into(),
            adam_steps: [0; 3],
        },
        arrays: net.params().into_iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
    };
    save_checkpoint(&ckpt, path)
}

/// Reads a perceptual network from a file written by [`save_perceptual`] or
/// from a full training checkpoint. The result is frozen.
pub fn load_perceptual(path: impl AsRef<Path>) -> Result<(PerceptualNet, ModelConfig)> {
    let ckpt = load_checkpoint(path)?;
    let cfg = ckpt.meta.model.clone();
    let mut init = ChaCha8Rng::seed_from_u64(0);
    let mut net = PerceptualNet::new(&cfg, ckpt.meta.perceptual_classes, &mut init)?;
    ckpt.load_into(&mut net)?;
    net.freeze();
    Ok((net, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            image_size: 32,
            latent_dim: 8,
            encoder_widths: vec![4, 8],
            decoder_widths: vec![8, 4],
            disc_widths: vec![4, 8],
            perceptual_widths: vec![8, 8, 16, 16, 16],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn pretraining_lowers_loss_and_beats_chance() {
        let cfg = small();
        let mut init = ChaCha8Rng::seed_from_u64(3);
        let mut net = PerceptualNet::new(&cfg, SHAPE_CLASSES, &mut init).unwrap();
        let (x, y) = shapes_corpus(400, 32, 5);
        let p = PretrainConfig { epochs: 6, batch_size: 20, lr: 3e-3, seed: 1 };
        let stats = pretrain(&mut net, &x, &y, &p, |_| {}).unwrap();
        assert!(stats.last().unwrap().loss < stats[0].loss, "{stats:?}");
        assert!(accuracy(&net, &x, &y).unwrap() > 0.3);
    }

    #[test]
    fn frozen_net_refuses_training_and_bad_labels_rejected() {
        let cfg = small();
        let mut init = ChaCha8Rng::seed_from_u64(3);
        let mut net = PerceptualNet::new(&cfg, 3, &mut init).unwrap();
        let (x, _) = shapes_corpus(4, 32, 5);
        assert!(matches!(pretrain(&mut net, &x, &[0, 1, 2, 3], &PretrainConfig::default(), |_| {}), Err(Error::Input(_))));
        assert!(matches!(pretrain(&mut net, &x, &[0, 1], &PretrainConfig::default(), |_| {}), Err(Error::Input(_))));
        net.freeze();
        assert!(matches!(pretrain(&mut net, &x, &[0, 1, 2, 0], &PretrainConfig::default(), |_| {}), Err(Error::Config(_))));
    }

    #[test]
    fn save_and_load_round_trip() {
        let cfg = small();
        let mut init = ChaCha8Rng::seed_from_u64(3);
        let net = PerceptualNet::new(&cfg, 4, &mut init).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        save_perceptual(&net, &cfg, &path).unwrap();
        let (back, cfg2) = load_perceptual(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert!(back.is_frozen());
        assert_eq!(back.checksum(), net.checksum());
    }
}
