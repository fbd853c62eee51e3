//! Encoder, decoder, critic and the frozen perceptual feature network.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::nn::{residual_block, BatchNorm2d, Cache, Conv2d, Layer, Linear, Mode, Module, PadMode, Param, Sequential};
use crate::{Error, Result};

/// Images as (batch, channels, height, width), values in [-1, 1].
pub type ImageBatch = Array4<f32>;
/// Sampled latent vectors, one row per image.
pub type LatentCode = Array2<f32>;

/// Std of the zero-mean Gaussian used for every VAE/critic weight.
pub const INIT_STD: f32 = 0.02;

/// The five perceptual tap layers in network order.
pub const TAP_NAMES: [&str; 5] = ["relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1"];

/// Index of a perceptual tap layer (0 = `relu1_1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tap(usize);

impl Tap {
    pub const FIRST: Tap = Tap(0);

    pub fn all() -> Vec<Tap> {
        (0..TAP_NAMES.len()).map(Tap).collect()
    }

    pub fn index(self) -> usize {
        self.0
    }

    pub fn name(self) -> &'static str {
        TAP_NAMES[self.0]
    }

    pub fn parse(name: &str) -> Result<Tap> {
        TAP_NAMES
            .iter()
            .position(|t| *t == name.trim())
            .map(Tap)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown tap layer {name:?}; expected one of {}",
                    TAP_NAMES.join(", ")
                ))
            })
    }

    /// Parses names and returns them deduplicated in network order.
    pub fn parse_list<S: AsRef<str>>(names: &[S]) -> Result<Vec<Tap>> {
        let mut taps = names.iter().map(|n| Tap::parse(n.as_ref())).collect::<Result<Vec<_>>>()?;
        if taps.is_empty() {
            return Err(Error::Config("tap list is empty".into()));
        }
        taps.sort();
        taps.dedup();
        Ok(taps)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub disc_widths: Vec<usize>,
    /// Filter counts of the five perceptual stages.
    pub perceptual_widths: Vec<usize>,
    /// Images in [-1, 1] are multiplied by this before the perceptual net,
    /// giving the mean-subtracted 0..255 range VGG-style extractors expect.
    #[serde(default = "default_input_scale")]
    pub perceptual_input_scale: f32,
    pub clip_value: f32,
    pub leaky_slope: f32,
}

fn default_input_scale() -> f32 {
    127.5
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            channels: 3,
            latent_dim: 100,
            encoder_widths: vec![32, 64, 128, 256],
            decoder_widths: vec![256, 128, 64, 32],
            disc_widths: vec![64, 128, 256],
            perceptual_widths: vec![32, 64, 128, 256, 256],
            perceptual_input_scale: default_input_scale(),
            clip_value: 0.01,
            leaky_slope: 0.2,
        }
    }
}

impl ModelConfig {
    /// Quarter-width networks for single-core desk runs; geometry unchanged.
    pub fn desk() -> Self {
        ModelConfig {
            encoder_widths: vec![8, 16, 32, 64],
            decoder_widths: vec![64, 32, 16, 8],
            disc_widths: vec![16, 32, 64],
            perceptual_widths: vec![8, 16, 32, 64, 64],
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.latent_dim < 1 {
            return bad("latent_dim must be at least 1".into());
        }
        if self.channels < 1 {
            return bad("channels must be at least 1".into());
        }
        if !(self.clip_value > 0.0) {
            return bad(format!("clip_value must be > 0, got {}", self.clip_value));
        }
        if !(self.perceptual_input_scale > 0.0 && self.perceptual_input_scale.is_finite()) {
            return bad(format!("perceptual_input_scale must be finite and > 0, got {}", self.perceptual_input_scale));
        }
        if self.encoder_widths.is_empty() || self.decoder_widths.is_empty() {
            return bad("encoder_widths and decoder_widths must be nonempty".into());
        }
        for (what, widths) in [
            ("encoder_widths", &self.encoder_widths),
            ("decoder_widths", &self.decoder_widths),
            ("disc_widths", &self.disc_widths),
            ("perceptual_widths", &self.perceptual_widths),
        ] {
            if widths.iter().any(|&w| w == 0) {
                return bad(format!("{what} contains a zero width"));
            }
        }
        for (what, stages) in [
            ("encoder_widths", self.encoder_widths.len()),
            ("decoder_widths", self.decoder_widths.len()),
        ] {
            let div = 1usize << stages;
            if self.image_size == 0 || self.image_size % div != 0 {
                return bad(format!(
                    "image_size {} must be divisible by 2^len({what}) = {div}",
                    self.image_size
                ));
            }
        }
        if self.perceptual_widths.len() != TAP_NAMES.len() {
            return bad(format!(
                "perceptual_widths must list {} stages, got {}",
                TAP_NAMES.len(),
                self.perceptual_widths.len()
            ));
        }
        if self.image_size % 32 != 0 {
            return bad(format!(
                "image_size {} must be divisible by 32 for the five perceptual stages",
                self.image_size
            ));
        }
        let critic_in = self.image_size / 2;
        if critic_in != 4usize << self.disc_widths.len() {
            return bad(format!(
                "disc_widths has {} stages; the critic input is {critic_in}x{critic_in} and must reach 4x4, \
                 which needs {} stages",
                self.disc_widths.len(),
                (critic_in / 4).max(1).trailing_zeros()
            ));
        }
        Ok(())
    }

    /// Spatial side of the encoder's last feature map (and the decoder's seed).
    pub fn encoder_bottom(&self) -> usize {
        self.image_size >> self.encoder_widths.len()
    }

    pub fn decoder_seed(&self) -> usize {
        self.image_size >> self.decoder_widths.len()
    }

    pub(crate) fn check_images(&self, x: &ImageBatch) -> Result<()> {
        let (n, c, h, w) = x.dim();
        if n == 0 || c != self.channels || h != self.image_size || w != self.image_size {
            return Err(Error::Input(format!(
                "expected images (N>=1, {}, {}, {}), got ({n}, {c}, {h}, {w})",
                self.channels, self.image_size, self.image_size
            )));
        }
        Ok(())
    }
}

/// Posterior parameters of q(z|x), each (batch, latent_dim).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDistribution {
    pub mean: Array2<f32>,
    pub logvar: Array2<f32>,
}

/// z = mean + exp(logvar / 2) * noise.
pub fn reparameterize(dist: &LatentDistribution, noise: &Array2<f32>) -> Result<LatentCode> {
    if noise.dim() != dist.mean.dim() || dist.logvar.dim() != dist.mean.dim() {
        return Err(Error::Input(format!(
            "noise {:?} must match posterior {:?}",
            noise.dim(),
            dist.mean.dim()
        )));
    }
    let mut z = dist.logvar.mapv(|lv| (lv * 0.5).exp());
    z *= noise;
    z += &dist.mean;
    Ok(z)
}

fn flatten(x: &Array4<f32>) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, c * h * w))
        .expect("contiguous")
}

fn unflatten(x: Array2<f32>, c: usize, h: usize, w: usize) -> Array4<f32> {
    let n = x.nrows();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, c, h, w))
        .expect("contiguous")
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: ModelConfig,
    trunk: Sequential,
    mean_head: Linear,
    logvar_head: Linear,
}

pub struct EncoderCache {
    trunk: Vec<Cache>,
    flat: Array2<f32>,
    trunk_dim: (usize, usize, usize, usize),
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut trunk = Sequential::new();
        let mut in_ch = cfg.channels;
        for (i, &w) in cfg.encoder_widths.iter().enumerate() {
            let name = format!("encoder.stage{i}");
            trunk.push(Layer::Conv(Conv2d::new(
                &format!("{name}.down"),
                in_ch,
                w,
                4,
                2,
                1,
                PadMode::Zero,
                INIT_STD,
                rng,
            )));
            trunk.push(Layer::Norm(BatchNorm2d::new(&format!("{name}.bn"), w)));
            trunk.push(Layer::LeakyRelu(cfg.leaky_slope));
            trunk.push(residual_block(
                &format!("{name}.res"),
                w,
                PadMode::Zero,
                true,
                cfg.leaky_slope,
                INIT_STD,
                rng,
            ));
            in_ch = w;
        }
        let s = cfg.encoder_bottom();
        let flat = in_ch * s * s;
        Ok(Encoder {
            cfg: cfg.clone(),
            trunk,
            mean_head: Linear::new("encoder.mean", flat, cfg.latent_dim, INIT_STD, rng),
            logvar_head: Linear::new("encoder.logvar", flat, cfg.latent_dim, INIT_STD, rng),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    /// Evaluation-mode posterior; a pure function of parameters and input.
    pub fn encode(&self, x: &ImageBatch) -> Result<LatentDistribution> {
        Ok(self.forward(x, Mode::Eval)?.0)
    }

    pub fn forward(&self, x: &ImageBatch, mode: Mode) -> Result<(LatentDistribution, EncoderCache)> {
        self.cfg.check_images(x)?;
        let (h, trunk) = self.trunk.forward(x, mode);
        let trunk_dim = h.dim();
        let flat = flatten(&h);
        let mean = self.mean_head.forward(&flat);
        let logvar = self.logvar_head.forward(&flat);
        Ok((
            LatentDistribution { mean, logvar },
            EncoderCache {
                trunk,
                flat,
                trunk_dim,
            },
        ))
    }

    pub fn commit(&mut self, cache: &EncoderCache) {
        self.trunk.commit(&cache.trunk);
    }

    /// Accumulates parameter gradients from upstream gradients on the two heads.
    pub fn backward(&mut self, cache: EncoderCache, d_mean: &Array2<f32>, d_logvar: &Array2<f32>) {
        let mut dflat = self.mean_head.backward(&cache.flat, d_mean, true);
        dflat += &self.logvar_head.backward(&cache.flat, d_logvar, true);
        let (_, c, h, w) = cache.trunk_dim;
        let dh = unflatten(dflat, c, h, w);
        self.trunk.backward(cache.trunk, dh, true);
    }

    /// Spatial side after each downsampling stage, for shape checks.
    pub fn stage_sizes(&self, x: &ImageBatch) -> Result<Vec<usize>> {
        self.cfg.check_images(x)?;
        let mut sizes = Vec::new();
        let mut cur = x.clone();
        let per_stage = 4;
        for chunk in self.trunk.layers.chunks(per_stage) {
            let seq = Sequential {
                layers: chunk.to_vec(),
            };
            cur = seq.forward(&cur, Mode::Eval).0;
            sizes.push(cur.dim().2);
        }
        Ok(sizes)
    }
}

impl Module for Encoder {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.trunk.params();
        p.extend(self.mean_head.params());
        p.extend(self.logvar_head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.trunk.params_mut();
        p.extend(self.mean_head.params_mut());
        p.extend(self.logvar_head.params_mut());
        p
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: ModelConfig,
    project: Linear,
    body: Sequential,
}

pub struct DecoderCache {
    z: Array2<f32>,
    body: Vec<Cache>,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.decoder_seed();
        let seed_ch = cfg.decoder_widths[0];
        let project = Linear::new("decoder.project", cfg.latent_dim, seed_ch * s * s, INIT_STD, rng);
        let mut body = Sequential::new();
        body.push(Layer::Norm(BatchNorm2d::new("decoder.seed_bn", seed_ch)));
        body.push(Layer::LeakyRelu(cfg.leaky_slope));
        let mut in_ch = seed_ch;
        let last = cfg.decoder_widths.len() - 1;
        for (i, &w) in cfg.decoder_widths.iter().enumerate() {
            let name = format!("decoder.stage{i}");
            body.push(Layer::Upsample2x);
            body.push(Layer::Conv(Conv2d::new(
                &format!("{name}.conv"),
                in_ch,
                w,
                3,
                1,
                1,
                PadMode::Replicate,
                INIT_STD,
                rng,
            )));
            body.push(Layer::Norm(BatchNorm2d::new(&format!("{name}.bn"), w)));
            body.push(Layer::LeakyRelu(cfg.leaky_slope));
            if i != last {
                body.push(residual_block(
                    &format!("{name}.res"),
                    w,
                    PadMode::Replicate,
                    true,
                    cfg.leaky_slope,
                    INIT_STD,
                    rng,
                ));
            }
            in_ch = w;
        }
        body.push(Layer::Conv(Conv2d::new(
            "decoder.out",
            in_ch,
            cfg.channels,
            3,
            1,
            1,
            PadMode::Replicate,
            INIT_STD,
            rng,
        )));
        body.push(Layer::Tanh);
        Ok(Decoder {
            cfg: cfg.clone(),
            project,
            body,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn decode(&self, z: &LatentCode) -> Result<ImageBatch> {
        Ok(self.forward(z, Mode::Eval)?.0)
    }

    pub fn forward(&self, z: &LatentCode, mode: Mode) -> Result<(ImageBatch, DecoderCache)> {
        if z.ncols() != self.cfg.latent_dim || z.nrows() == 0 {
            return Err(Error::Input(format!(
                "latent codes must be (N>=1, {}), got {:?}",
                self.cfg.latent_dim,
                z.dim()
            )));
        }
        let s = self.cfg.decoder_seed();
        let seed = unflatten(self.project.forward(z), self.cfg.decoder_widths[0], s, s);
        let (x, body) = self.body.forward(&seed, mode);
        Ok((x, DecoderCache { z: z.clone(), body }))
    }

    pub fn commit(&mut self, cache: &DecoderCache) {
        self.body.commit(&cache.body);
    }

    /// Accumulates parameter gradients and returns d/dz.
    pub fn backward(&mut self, cache: DecoderCache, dx: Array4<f32>) -> Array2<f32> {
        let dseed = self.body.backward(cache.body, dx, true);
        self.project.backward(&cache.z, &flatten(&dseed), true)
    }
}

impl Module for Decoder {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.project.params();
        p.extend(self.body.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.project.params_mut();
        p.extend(self.body.params_mut());
        p
    }
}

/// Critic over first-tap perceptual features; one unbounded score per image.
#[derive(Debug, Clone)]
pub struct Discriminator {
    in_channels: usize,
    in_size: usize,
    body: Sequential,
}

pub struct DiscriminatorCache {
    body: Vec<Cache>,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let in_channels = cfg.perceptual_widths[0];
        let mut body = Sequential::new();
        let mut in_ch = in_channels;
        for (i, &w) in cfg.disc_widths.iter().enumerate() {
            let name = format!("disc.stage{i}");
            body.push(Layer::Conv(Conv2d::new(
                &format!("{name}.down"),
                in_ch,
                w,
                4,
                2,
                1,
                PadMode::Zero,
                INIT_STD,
                rng,
            )));
            body.push(Layer::LeakyRelu(cfg.leaky_slope));
            if i + 1 < cfg.disc_widths.len() {
                body.push(residual_block(
                    &format!("{name}.res"),
                    w,
                    PadMode::Zero,
                    false,
                    cfg.leaky_slope,
                    INIT_STD,
                    rng,
                ));
            }
            in_ch = w;
        }
        body.push(Layer::Conv(Conv2d::new(
            "disc.score",
            in_ch,
            1,
            4,
            1,
            0,
            PadMode::Zero,
            INIT_STD,
            rng,
        )));
        Ok(Discriminator {
            in_channels,
            in_size: cfg.image_size / 2,
            body,
        })
    }

    fn check(&self, f: &Array4<f32>) -> Result<()> {
        let (n, c, h, w) = f.dim();
        if n == 0 || c != self.in_channels || h != self.in_size || w != self.in_size {
            return Err(Error::Input(format!(
                "critic expects first-tap features (N>=1, {}, {}, {}), got ({n}, {c}, {h}, {w})",
                self.in_channels, self.in_size, self.in_size
            )));
        }
        Ok(())
    }

    pub fn discriminate(&self, f: &Array4<f32>) -> Result<Array1<f32>> {
        Ok(self.forward(f)?.0)
    }

    /// The critic has no normalization layers, so there is no train/eval distinction.
    pub fn forward(&self, f: &Array4<f32>) -> Result<(Array1<f32>, DiscriminatorCache)> {
        self.check(f)?;
        let (y, body) = self.body.forward(f, Mode::Train);
        let n = y.dim().0;
        let scores = y.into_shape_with_order(n).expect("one score per image");
        Ok((scores, DiscriminatorCache { body }))
    }

    /// Returns the gradient with respect to the input features.
    pub fn backward(&mut self, cache: DiscriminatorCache, d_scores: &Array1<f32>, param_grads: bool) -> Array4<f32> {
        let n = d_scores.len();
        let dy = d_scores
            .clone()
            .into_shape_with_order((n, 1, 1, 1))
            .expect("contiguous");
        self.body.backward(cache.body, dy, param_grads)
    }

    /// Largest |p| over trainable parameters.
    pub fn max_abs_param(&self) -> f32 {
        self.params()
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.value.iter())
            .fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

impl Module for Discriminator {
    fn params(&self) -> Vec<&Param> {
        self.body.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.body.params_mut()
    }
}

/// Projects every critic parameter into [-c, c].
pub fn clip_parameters(disc: &mut Discriminator, c: f32) -> Result<()> {
    if !(c > 0.0) {
        return Err(Error::Config(format!("clip value must be > 0, got {c}")));
    }
    for p in disc.params_mut() {
        if p.trainable {
            p.value.mapv_inplace(|v| v.clamp(-c, c));
        }
    }
    Ok(())
}

pub fn build_models<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<(Encoder, Decoder, Discriminator)> {
    cfg.validate()?;
    Ok((Encoder::new(cfg, rng)?, Decoder::new(cfg, rng)?, Discriminator::new(cfg, rng)?))
}

/// Ordered per-layer activation volumes; each entry is (batch, C_l, H_l, W_l).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub layers: Vec<(Tap, Array4<f32>)>,
}

impl FeatureStack {
    pub fn get(&self, tap: Tap) -> Option<&Array4<f32>> {
        self.layers.iter().find(|(t, _)| *t == tap).map(|(_, a)| a)
    }

    pub fn taps(&self) -> Vec<Tap> {
        self.layers.iter().map(|(t, _)| *t).collect()
    }

    /// (C_l, W_l, H_l) per layer.
    pub fn dims(&self) -> Vec<(usize, usize, usize)> {
        self.layers
            .iter()
            .map(|(_, a)| {
                let (_, c, h, w) = a.dim();
                (c, w, h)
            })
            .collect()
    }
}

/// Fixed VGG-style classifier: five stride-2 3x3 convolution stages with ReLU
/// taps, plus a global-average-pool linear head for pretraining and scoring.
///
/// The head sees images in [-1, 1]; feature taps see them multiplied by the
/// configured input scale, which by homogeneity scales every tap by the same
/// factor.
#[derive(Debug, Clone)]
pub struct PerceptualNet {
    channels: usize,
    image_size: usize,
    input_scale: f32,
    stages: Vec<Sequential>,
    head: Linear,
    frozen: bool,
}

pub struct PerceptualCache {
    stages: Vec<Vec<Cache>>,
}

impl PerceptualNet {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, classes: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::new();
        let mut in_ch = cfg.channels;
        for (i, &w) in cfg.perceptual_widths.iter().enumerate() {
            // He initialization; no normalization layers and no biases, so the
            // stack is positively homogeneous in its input.
            let std = (2.0 / (in_ch * 9) as f32).sqrt();
            let mut s = Sequential::new();
            s.push(Layer::Conv(Conv2d::new(
                &format!("perceptual.conv{}", i + 1),
                in_ch,
                w,
                3,
                2,
                1,
                PadMode::Zero,
                std,
                rng,
            )
            .without_bias()));
            s.push(Layer::Relu);
            stages.push(s);
            in_ch = w;
        }
        let head_std = (1.0 / in_ch as f32).sqrt();
        Ok(PerceptualNet {
            channels: cfg.channels,
            image_size: cfg.image_size,
            input_scale: cfg.perceptual_input_scale,
            stages,
            head: Linear::new("perceptual.head", in_ch, classes, head_std, rng),
            frozen: false,
        })
    }

    pub fn classes(&self) -> usize {
        self.head.outputs()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.stages
            .iter()
            .map(|s| match &s.layers[0] {
                Layer::Conv(c) => c.out_channels(),
                _ => unreachable!("stage starts with a convolution"),
            })
            .collect()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn check(&self, x: &ImageBatch) -> Result<()> {
        let (n, c, h, w) = x.dim();
        if n == 0 || c != self.channels || h != self.image_size || w != self.image_size {
            return Err(Error::Input(format!(
                "perceptual net expects (N>=1, {}, {}, {}), got ({n}, {c}, {h}, {w})",
                self.channels, self.image_size, self.image_size
            )));
        }
        Ok(())
    }

    /// Activations for exactly the requested taps, in network order.
    pub fn features(&self, x: &ImageBatch, taps: &[Tap]) -> Result<FeatureStack> {
        Ok(self.forward(x, taps)?.0)
    }

    pub fn forward(&self, x: &ImageBatch, taps: &[Tap]) -> Result<(FeatureStack, PerceptualCache)> {
        self.check(x)?;
        let mut sorted = taps.to_vec();
        sorted.sort();
        sorted.dedup();
        let depth = sorted.last().map_or(0, |t| t.index() + 1);
        let (outs, stages) = self.run_stages(x, depth, self.input_scale);
        let layers = sorted.iter().map(|&t| (t, outs[t.index()].clone())).collect();
        Ok((FeatureStack { layers }, PerceptualCache { stages }))
    }

    fn run_stages(&self, x: &ImageBatch, depth: usize, scale: f32) -> (Vec<Array4<f32>>, Vec<Vec<Cache>>) {
        let mut outs: Vec<Array4<f32>> = Vec::with_capacity(depth);
        let mut caches = Vec::with_capacity(depth);
        let scaled = x * scale;
        for stage in &self.stages[..depth] {
            let input = outs.last().unwrap_or(&scaled);
            let (y, c) = stage.forward(input, Mode::Eval);
            outs.push(y);
            caches.push(c);
        }
        (outs, caches)
    }

    /// Input gradient given upstream gradients on some tap outputs. Never
    /// touches parameter gradients when frozen.
    pub fn backward(&mut self, cache: PerceptualCache, tap_grads: Vec<(Tap, Array4<f32>)>) -> Array4<f32> {
        let param_grads = !self.frozen;
        let depth = cache.stages.len();
        let mut grads: Vec<Option<Array4<f32>>> = vec![None; depth];
        for (t, g) in tap_grads {
            let slot = &mut grads[t.index()];
            match slot {
                Some(acc) => *acc += &g,
                None => *slot = Some(g),
            }
        }
        let mut carry: Option<Array4<f32>> = None;
        for (i, caches) in cache.stages.into_iter().enumerate().rev() {
            let g = match (carry.take(), grads[i].take()) {
                (Some(mut a), Some(b)) => {
                    a += &b;
                    a
                }
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => continue,
            };
            carry = Some(self.stages[i].backward(caches, g, param_grads));
        }
        carry.expect("at least one tap gradient") * self.input_scale
    }

    /// Class logits from the pooled last stage.
    pub fn logits(&self, x: &ImageBatch) -> Result<Array2<f32>> {
        self.check(x)?;
        let (outs, _) = self.run_stages(x, self.stages.len(), 1.0);
        Ok(self.head.forward(&global_pool(outs.last().expect("five stages"))))
    }

    /// Softmax class probabilities, one row per image.
    pub fn probabilities(&self, x: &ImageBatch) -> Result<Array2<f32>> {
        Ok(softmax_rows(&self.logits(x)?))
    }

    /// One supervised step of softmax cross-entropy; returns (mean loss, accuracy).
    pub(crate) fn classification_grads(&mut self, x: &ImageBatch, labels: &[usize]) -> Result<(f32, f32)> {
        if self.frozen {
            return Err(Error::Config("perceptual net is frozen".into()));
        }
        self.check(x)?;
        let n = labels.len();
        let (outs, caches) = self.run_stages(x, self.stages.len(), 1.0);
        let last = outs.last().expect("five stages");
        let pooled = global_pool(last);
        let probs = softmax_rows(&self.head.forward(&pooled));
        let mut loss = 0.0f32;
        let mut correct = 0usize;
        let mut dlogits = probs.clone();
        for (i, &y) in labels.iter().enumerate() {
            loss -= probs[[i, y]].max(1e-12).ln();
            let pred = probs
                .row(i)
                .iter()
                .enumerate()
                .fold((0, f32::MIN), |b, (j, &p)| if p > b.1 { (j, p) } else { b })
                .0;
            correct += (pred == y) as usize;
            dlogits[[i, y]] -= 1.0;
        }
        dlogits /= n as f32;
        let dpooled = self.head.backward(&pooled, &dlogits, true);
        let (_, c, h, w) = last.dim();
        let scale = 1.0 / (h * w) as f32;
        let mut dlast = Array4::<f32>::zeros((n, c, h, w));
        for ((i, ch), v) in dpooled.indexed_iter() {
            dlast.slice_mut(ndarray::s![i, ch, .., ..]).fill(v * scale);
        }
        let mut g = dlast;
        for (stage, cache) in self.stages.iter_mut().zip(caches).rev() {
            g = stage.backward(cache, g, true);
        }
        Ok((loss / n as f32, correct as f32 / n as f32))
    }
}

impl Module for PerceptualNet {
    fn params(&self) -> Vec<&Param> {
        let mut p: Vec<&Param> = self.stages.iter().flat_map(|s| s.params()).collect();
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p: Vec<&mut Param> = self.stages.iter_mut().flat_map(|s| s.params_mut()).collect();
        p.extend(self.head.params_mut());
        p
    }
}

fn global_pool(x: &Array4<f32>) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    x.view()
        .into_shape_with_order((n, c, h * w))
        .expect("contiguous")
        .mean_axis(Axis(2))
        .expect("nonempty spatial extent")
}

pub(crate) fn softmax_rows(logits: &Array2<f32>) -> Array2<f32> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f32::MIN, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

/// Standard-normal array from the given stream.
pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f32> {
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}
