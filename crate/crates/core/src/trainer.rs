//! The VAE-WGAN training loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint, CheckpointMeta};
use crate::data::batches;
use crate::losses::{
    adversarial_losses, feature_reconstruction_loss_with_grad, kl_divergence_with_grad,
    pixel_reconstruction_loss_with_grad, total_vae_loss, LossReport, LossWeights,
};
use crate::models::{
    build_models, clip_parameters, reparameterize, standard_normal, Decoder, Discriminator, Encoder, ImageBatch,
    ModelConfig, PerceptualNet, Tap, TAP_NAMES,
};
use crate::nn::{Adam, Mode, Module, Param};
use crate::{Error, Result};

const NOISE_STREAM: u64 = 1;
const SHUFFLE_STREAM_BASE: u64 = 1 << 32;

/// Which objective the encoder/decoder descend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// KL + feature reconstruction + adversarial term, with critic updates.
    #[default]
    VaeWgan,
    /// KL + feature reconstruction only.
    FeatureVae,
    /// KL + pixel mean squared error (plain VAE baseline).
    PixelVae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Multiplier applied at every epoch boundary after the first.
    pub lr_decay: f64,
    pub weights: LossWeights,
    pub clip_value: f32,
    pub seed: u64,
    pub loss_taps: Vec<String>,
    /// Write a snapshot every this many steps; 0 means at every epoch end.
    pub snapshot_every: u64,
    pub objective: Objective,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 5,
            lr: 0.0005,
            lr_decay: 0.5,
            weights: LossWeights::default(),
            clip_value: 0.01,
            seed: 0,
            loss_taps: TAP_NAMES.iter().map(|s| s.to_string()).collect(),
            snapshot_every: 0,
            objective: Objective::VaeWgan,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
        }
    }
}

impl TrainConfig {
    /// Default schedule with batch 16.
    pub fn desk() -> Self {
        TrainConfig { batch_size: 16, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        if !(self.clip_value > 0.0) {
            return Err(Error::Config(format!("clip_value must be > 0, got {}", self.clip_value)));
        }
        self.weights.validate()?;
        self.taps()?;
        Ok(())
    }

    pub fn taps(&self) -> Result<Vec<Tap>> {
        Tap::parse_list(&self.loss_taps)
    }

    /// Learning rate in force during `epoch` (1-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch.saturating_sub(1) as i32)
    }

    /// Full batches per epoch; a short final batch is dropped.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n / self.batch_size
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    /// 1-based epoch the step belongs to.
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossReport,
    /// Largest |p| over critic parameters after clipping.
    pub disc_max_abs: f32,
    pub wall_secs: f64,
}

/// Equality ignores wall time.
impl PartialEq for StepReport {
    fn eq(&self, other: &Self) -> bool {
        self.step == other.step
            && self.epoch == other.epoch
            && self.lr == other.lr
            && self.losses == other.losses
            && self.disc_max_abs == other.disc_max_abs
    }
}

/// All trainable networks, their optimizers and the run position.
pub struct Trainer {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub discriminator: Discriminator,
    pub perceptual: PerceptualNet,
    opt_enc: Adam,
    opt_dec: Adam,
    opt_disc: Adam,
    taps: Vec<Tap>,
    noise: ChaCha8Rng,
    epoch: usize,
    step: u64,
    step_in_epoch: usize,
}

impl Trainer {
    /// Fresh networks initialized from `train_cfg.seed`; `perceptual` is frozen here.
    pub fn new(model_cfg: ModelConfig, train_cfg: TrainConfig, mut perceptual: PerceptualNet) -> Result<Self> {
        model_cfg.validate()?;
        train_cfg.validate()?;
        if perceptual.widths() != model_cfg.perceptual_widths {
            return Err(Error::Config(format!(
                "perceptual net widths {:?} do not match model config {:?}",
                perceptual.widths(),
                model_cfg.perceptual_widths
            )));
        }
        perceptual.freeze();
        let mut init = ChaCha8Rng::seed_from_u64(train_cfg.seed);
        let (encoder, decoder, discriminator) = build_models(&model_cfg, &mut init)?;
        let mut noise = ChaCha8Rng::seed_from_u64(train_cfg.seed);
        noise.set_stream(NOISE_STREAM);
        let adam = |c: &TrainConfig| Adam::new(c.lr as f32, c.adam_beta1, c.adam_beta2);
        Ok(Trainer {
            taps: train_cfg.taps()?,
            opt_enc: adam(&train_cfg),
            opt_dec: adam(&train_cfg),
            opt_disc: adam(&train_cfg),
            model_cfg,
            train_cfg,
            encoder,
            decoder,
            discriminator,
            perceptual,
            noise,
            epoch: 0,
            step: 0,
            step_in_epoch: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn completed_epochs(&self) -> usize {
        self.epoch
    }

    pub fn current_lr(&self) -> f64 {
        self.train_cfg.lr_at_epoch(self.epoch + 1)
    }

    fn set_lr(&mut self, lr: f64) {
        for opt in [&mut self.opt_enc, &mut self.opt_dec, &mut self.opt_disc] {
            opt.lr = lr as f32;
        }
    }

    /// One interleaved encoder / decoder / critic update.
    pub fn train_step(&mut self, x: &ImageBatch) -> Result<StepReport> {
        let started = Instant::now();
        let cfg = &self.train_cfg;
        let w = cfg.weights;
        let adversarial = cfg.objective == Objective::VaeWgan;

        self.encoder.zero_grad();
        self.decoder.zero_grad();
        self.discriminator.zero_grad();

        let (dist, enc_cache) = self.encoder.forward(x, Mode::Train)?;
        let (kl, d_mean_kl, d_logvar_kl) = kl_divergence_with_grad(
            dist.mean.mapv(f64::from).view(),
            dist.logvar.mapv(f64::from).view(),
        )
        .map_err(|e| Error::Numeric(format!("non-finite loss term kl at step {}: {e}", self.step + 1)))?;
        let noise = standard_normal(dist.mean.nrows(), dist.mean.ncols(), &mut self.noise);
        let z = reparameterize(&dist, &noise)?;
        let (xr, dec_cache) = self.decoder.forward(&z, Mode::Train)?;

        let mut feature_taps = self.taps.clone();
        if adversarial && !feature_taps.contains(&Tap::FIRST) {
            feature_taps.insert(0, Tap::FIRST);
        }
        let mut rec_per_layer = Vec::new();
        let rec_total;
        let mut gan = 0.0;
        let mut gen_term = 0.0;
        let dxr = if cfg.objective == Objective::PixelVae {
            let (rec, mut g) = pixel_reconstruction_loss_with_grad(x.view(), xr.view())?;
            rec_total = rec as f64;
            rec_per_layer.push(("pixel".to_string(), rec_total));
            g.mapv_inplace(|v| v * w.beta as f32);
            g
        } else {
            let real_feats = self.perceptual.features(x, &feature_taps)?;
            let (fake_feats, p_cache) = self.perceptual.forward(&xr, &feature_taps)?;
            let real_sel = crate::models::FeatureStack {
                layers: real_feats.layers.iter().filter(|(t, _)| self.taps.contains(t)).cloned().collect(),
            };
            let fake_sel = crate::models::FeatureStack {
                layers: fake_feats.layers.iter().filter(|(t, _)| self.taps.contains(t)).cloned().collect(),
            };
            let (rec, per_layer, rec_grads) =
                feature_reconstruction_loss_with_grad(&real_sel, &fake_sel, w.feature_weighting)?;
            rec_total = rec;
            rec_per_layer = per_layer.iter().map(|(t, l)| (t.name().to_string(), *l)).collect();
            let mut tap_grads: Vec<(Tap, ndarray::Array4<f32>)> = rec_grads
                .into_iter()
                .map(|(t, mut g)| {
                    g.mapv_inplace(|v| v * w.beta as f32);
                    (t, g)
                })
                .collect();

            if adversarial {
                let real_f1 = real_feats.get(Tap::FIRST).expect("first tap requested");
                let fake_f1 = fake_feats.get(Tap::FIRST).expect("first tap requested");
                let (s_real, c_real) = self.discriminator.forward(real_f1)?;
                let (s_fake, c_fake) = self.discriminator.forward(fake_f1)?;
                let adv = adversarial_losses(
                    s_real.as_slice().expect("contiguous"),
                    s_fake.as_slice().expect("contiguous"),
                    &w,
                )?;
                gan = adv.gan as f64;
                gen_term = adv.gen_term as f64;
                let d_gen = Array1::from(adv.d_gen_fake.clone());
                let gen_fake_grad = match w.adversarial_mode {
                    crate::losses::AdversarialMode::Wasserstein => {
                        // d_gen_fake == -d_disc_fake, so one pass yields both.
                        self.discriminator
                            .backward(c_fake, &Array1::from(adv.d_disc_fake.clone()), true)
                            .mapv(|v| -v)
                    }
                    crate::losses::AdversarialMode::LabelTarget => {
                        self.discriminator
                            .backward(c_fake, &Array1::from(adv.d_disc_fake.clone()), true);
                        let (_, c_again) = self.discriminator.forward(fake_f1)?;
                        self.discriminator.backward(c_again, &d_gen, false)
                    }
                };
                self.discriminator
                    .backward(c_real, &Array1::from(adv.d_disc_real.clone()), true);
                tap_grads.push((Tap::FIRST, gen_fake_grad));
            }
            self.perceptual.backward(p_cache, tap_grads)
        };

        let losses = LossReport {
            kl,
            rec_per_layer,
            rec_total,
            gan,
            total: total_vae_loss(kl, rec_total, gen_term, &w).unwrap_or(f64::NAN),
        };
        if let Some(term) = losses.offending_term() {
            return Err(Error::Numeric(format!(
                "non-finite loss term {term} at step {} (kl={}, rec={}, gan={})",
                self.step + 1,
                losses.kl,
                losses.rec_total,
                losses.gan
            )));
        }

        // batch statistics only enter the running averages once the step is known to be finite
        self.encoder.commit(&enc_cache);
        self.decoder.commit(&dec_cache);
        let dz = self.decoder.backward(dec_cache, dxr);
        let alpha = w.alpha as f32;
        let mut d_mean: Array2<f32> = d_mean_kl.mapv(|v| v as f32 * alpha);
        d_mean += &dz;
        let sigma_noise = ndarray::Zip::from(&dist.logvar)
            .and(&noise)
            .map_collect(|&lv, &n| 0.5 * (0.5 * lv).exp() * n);
        let mut d_logvar: Array2<f32> = d_logvar_kl.mapv(|v| v as f32 * alpha);
        d_logvar += &(&dz * &sigma_noise);
        self.encoder.backward(enc_cache, &d_mean, &d_logvar);

        self.opt_enc.step(self.encoder.params_mut());
        self.opt_dec.step(self.decoder.params_mut());
        if adversarial {
            self.opt_disc.step(self.discriminator.params_mut());
            clip_parameters(&mut self.discriminator, self.train_cfg.clip_value)?;
        }

        self.step += 1;
        Ok(StepReport {
            step: self.step,
            epoch: self.epoch + 1,
            lr: self.current_lr(),
            losses,
            disc_max_abs: self.discriminator.max_abs_param(),
            wall_secs: started.elapsed().as_secs_f64(),
        })
    }

    /// Runs the remaining schedule (resuming mid-epoch if needed). Stops early
    /// once the global step reaches `opts.max_steps`.
    pub fn run(
        &mut self,
        images: &ImageBatch,
        opts: &RunOptions,
        mut on_step: impl FnMut(&StepReport),
    ) -> Result<()> {
        let n = images.dim().0;
        if n == 0 {
            return Err(Error::Input("training set is empty".into()));
        }
        self.model_cfg.check_images(images)?;
        let per_epoch = self.train_cfg.steps_per_epoch(n);
        let bs = self.train_cfg.batch_size;
        if per_epoch == 0 {
            return Err(Error::Input(format!("training set has {n} images, fewer than one batch of {bs}")));
        }
        while self.epoch < self.train_cfg.epochs {
            self.set_lr(self.train_cfg.lr_at_epoch(self.epoch + 1));
            let order = epoch_order(n, self.train_cfg.seed, self.epoch);
            let schedule = batches(&order, bs, false);
            while self.step_in_epoch < per_epoch {
                if opts.max_steps.is_some_and(|m| self.step >= m) {
                    return Ok(());
                }
                let batch = images.select(Axis(0), schedule[self.step_in_epoch]);
                let report = self.train_step(&batch)?;
                self.step_in_epoch += 1;
                on_step(&report);
                let every = self.train_cfg.snapshot_every;
                if every > 0 && self.step % every == 0 {
                    self.snapshot(opts)?;
                }
            }
            self.epoch += 1;
            self.step_in_epoch = 0;
            if self.train_cfg.snapshot_every == 0 {
                self.snapshot(opts)?;
            }
        }
        Ok(())
    }

    fn snapshot(&self, opts: &RunOptions) -> Result<()> {
        if let Some(dir) = &opts.snapshot_dir {
            save_checkpoint(&self.checkpoint(), snapshot_path(dir, self.step))?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut arrays: Vec<(String, ndarray::ArrayD<f32>)> = Vec::new();
        let mut push_module = |params: Vec<&Param>| {
            for p in params {
                arrays.push((p.name.clone(), p.value.clone()));
            }
        };
        push_module(self.encoder.params());
        push_module(self.decoder.params());
        push_module(self.discriminator.params());
        push_module(self.perceptual.params());
        for (tag, opt, params) in [
            ("encoder", &self.opt_enc, self.encoder.params()),
            ("decoder", &self.opt_dec, self.decoder.params()),
            ("disc", &self.opt_disc, self.discriminator.params()),
        ] {
            let trainable: Vec<&Param> = params.into_iter().filter(|p| p.trainable).collect();
            for (i, p) in trainable.iter().enumerate() {
                if let (Some(m), Some(v)) = (opt.state.m.get(i), opt.state.v.get(i)) {
                    arrays.push((format!("adam.{tag}.m/{}", p.name), m.clone()));
                    arrays.push((format!("adam.{tag}.v/{}", p.name), v.clone()));
                }
            }
        }
        Checkpoint {
            meta: CheckpointMeta {
                model: self.model_cfg.clone(),
                train: self.train_cfg.clone(),
                epoch: self.epoch,
                step: self.step,
                step_in_epoch: self.step_in_epoch,
                perceptual_classes: self.perceptual.classes(),
                noise_word_pos: self.noise.get_word_pos().to_string(),
                adam_steps: [
                    self.opt_enc.state.step,
                    self.opt_dec.state.step,
                    self.opt_disc.state.step,
                ],
            },
            arrays,
        }
    }

    /// Rebuilds the full training state stored in `ckpt`.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = &ckpt.meta;
        let mut init = ChaCha8Rng::seed_from_u64(0);
        let mut perceptual = PerceptualNet::new(&meta.model, meta.perceptual_classes, &mut init)?;
        ckpt.load_into(&mut perceptual)?;
        let mut t = Trainer::new(meta.model.clone(), meta.train.clone(), perceptual)?;
        ckpt.load_into(&mut t.encoder)?;
        ckpt.load_into(&mut t.decoder)?;
        ckpt.load_into(&mut t.discriminator)?;
        for (tag, opt, params, step) in [
            ("encoder", &mut t.opt_enc, t.encoder.params(), meta.adam_steps[0]),
            ("decoder", &mut t.opt_dec, t.decoder.params(), meta.adam_steps[1]),
            ("disc", &mut t.opt_disc, t.discriminator.params(), meta.adam_steps[2]),
        ] {
            opt.state.step = step;
            if step == 0 {
                continue;
            }
            let mut m = Vec::new();
            let mut v = Vec::new();
            for p in params.into_iter().filter(|p| p.trainable) {
                let get = |kind: &str| {
                    ckpt.array(&format!("adam.{tag}.{kind}/{}", p.name))
                        .cloned()
                        .ok_or_else(|| Error::Format(format!("missing optimizer state for {}", p.name)))
                };
                m.push(get("m")?);
                v.push(get("v")?);
            }
            opt.state.m = m;
            opt.state.v = v;
        }
        let pos: u128 = meta
            .noise_word_pos
            .parse()
            .map_err(|_| Error::Format(format!("bad noise position {:?}", meta.noise_word_pos)))?;
        t.noise.set_word_pos(pos);
        t.epoch = meta.epoch;
        t.step = meta.step;
        t.step_in_epoch = meta.step_in_epoch;
        t.set_lr(t.train_cfg.lr_at_epoch(t.epoch + 1));
        Ok(t)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub snapshot_dir: Option<PathBuf>,
    pub max_steps: Option<u64>,
}

/// `<run>/step_<N>.ckpt`
pub fn snapshot_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(format!("step_{step}.ckpt"))
}

/// Deterministic permutation of `0..n` for a given epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM_BASE + epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Trains from scratch over the whole schedule and returns the final checkpoint.
pub fn train(
    images: &ImageBatch,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    perceptual: PerceptualNet,
    opts: &RunOptions,
    on_step: impl FnMut(&StepReport),
) -> Result<Checkpoint> {
    if images.dim().0 == 0 {
        return Err(Error::Input("training set is empty".into()));
    }
    let mut t = Trainer::new(model_cfg, train_cfg, perceptual)?;
    t.run(images, opts, on_step)?;
    let ckpt = t.checkpoint();
    if let Some(dir) = &opts.snapshot_dir {
        save_checkpoint(&ckpt, dir.join("final.ckpt"))?;
    }
    Ok(ckpt)
}
