//! Scalar training objectives and their analytic gradients.
//!
//! Every loss is a mean over the batch axis. The generic functions work for
//! `f32` (training) and `f64` (gradient verification).

use ndarray::{Array, ArrayView, Dimension, NdFloat};
use serde::{Deserialize, Serialize};

use crate::models::{FeatureStack, LatentDistribution, Tap};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialMode {
    /// Critic descends mean(real) - mean(fake); generator adds the negation.
    Wasserstein,
    /// Least-squares pull of critic scores toward the labels +m / -m.
    LabelTarget,
}

/// How per-layer feature losses are combined into the reconstruction loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureWeighting {
    /// Layer l weighted by `numerator / C_l^2`.
    ChannelScaled { numerator: f64 },
    /// Plain sum of layer losses.
    Uniform,
}

impl Default for FeatureWeighting {
    fn default() -> Self {
        FeatureWeighting::ChannelScaled { numerator: 100.0 }
    }
}

impl FeatureWeighting {
    pub fn layer_weight(&self, channels: usize) -> f64 {
        match *self {
            FeatureWeighting::ChannelScaled { numerator } => numerator / (channels * channels) as f64,
            FeatureWeighting::Uniform => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// KL weight.
    pub alpha: f64,
    /// Reconstruction weight.
    pub beta: f64,
    pub gan_label_magnitude: f64,
    pub adversarial_mode: AdversarialMode,
    #[serde(default)]
    pub feature_weighting: FeatureWeighting,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.5,
            gan_label_magnitude: 10.0,
            adversarial_mode: AdversarialMode::Wasserstein,
            feature_weighting: FeatureWeighting::default(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "alpha and beta must be >= 0, got {} and {}",
                self.alpha, self.beta
            )));
        }
        if !(self.gan_label_magnitude > 0.0) {
            return Err(Error::Config(format!(
                "gan_label_magnitude must be > 0, got {}",
                self.gan_label_magnitude
            )));
        }
        if let FeatureWeighting::ChannelScaled { numerator } = self.feature_weighting {
            if !(numerator > 0.0) {
                return Err(Error::Config(format!("feature weighting numerator must be > 0, got {numerator}")));
            }
        }
        Ok(())
    }
}

/// Realized losses of one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub kl: f64,
    pub rec_per_layer: Vec<(String, f64)>,
    pub rec_total: f64,
    /// mean(real scores) - mean(fake scores).
    pub gan: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.offending_term().is_none()
    }

    /// Name of the first non-finite term, if any.
    pub fn offending_term(&self) -> Option<String> {
        if !self.kl.is_finite() {
            return Some("kl".into());
        }
        if let Some((name, _)) = self.rec_per_layer.iter().find(|(_, v)| !v.is_finite()) {
            return Some(format!("rec[{name}]"));
        }
        [("rec", self.rec_total), ("gan", self.gan), ("total", self.total)]
            .iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n.to_string())
    }
}

fn f<F: NdFloat>(v: f64) -> F {
    F::from(v).expect("representable constant")
}

fn same_shape<A, B, D: Dimension>(a: &ArrayView<A, D>, b: &ArrayView<B, D>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Input(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// Closed-form KL(q(z|x) || N(0, I)), averaged over the batch, with gradients.
pub fn kl_divergence_with_grad<F: NdFloat, D: Dimension>(
    mean: ArrayView<F, D>,
    logvar: ArrayView<F, D>,
) -> Result<(F, Array<F, D>, Array<F, D>)> {
    same_shape(&mean, &logvar, "kl_divergence")?;
    if mean.iter().chain(logvar.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("kl_divergence: non-finite mean or logvar".into()));
    }
    let batch = F::from(mean.shape().first().copied().unwrap_or(1).max(1)).expect("batch");
    let half = f::<F>(0.5);
    let mut total = F::zero();
    ndarray::Zip::from(&mean).and(&logvar).for_each(|&m, &lv| {
        total += lv.exp() + m * m - F::one() - lv;
    });
    let d_mean = mean.mapv(|m| m / batch);
    let d_logvar = logvar.mapv(|lv| half * (lv.exp() - F::one()) / batch);
    Ok((half * total / batch, d_mean, d_logvar))
}

pub fn kl_divergence(dist: &LatentDistribution) -> Result<f64> {
    let mean = dist.mean.mapv(f64::from);
    let logvar = dist.logvar.mapv(f64::from);
    Ok(kl_divergence_with_grad(mean.view(), logvar.view())?.0)
}

/// Per-image squared distance normalized by 2*C*W*H, averaged over the batch.
///
/// The leading axis is the batch; the remaining axes form one activation volume.
/// Returns the loss and its gradient with respect to `a` (the gradient with
/// respect to `b` is the negation).
pub fn layer_feature_loss_with_grad<F: NdFloat, D: Dimension>(
    a: ArrayView<F, D>,
    b: ArrayView<F, D>,
) -> Result<(F, Array<F, D>)> {
    same_shape(&a, &b, "layer_feature_loss")?;
    let shape = a.shape();
    if shape.is_empty() || a.is_empty() {
        return Err(Error::Input("layer_feature_loss: empty activation".into()));
    }
    let batch = shape[0];
    let volume = a.len() / batch;
    let denom = F::from(2 * batch * volume).expect("count");
    let mut diff = &a - &b;
    let sum = diff.iter().fold(F::zero(), |s, &d| s + d * d);
    let scale = f::<F>(2.0) / denom;
    diff.mapv_inplace(|d| d * scale);
    Ok((sum / denom, diff))
}

pub fn layer_feature_loss<F: NdFloat, D: Dimension>(a: ArrayView<F, D>, b: ArrayView<F, D>) -> Result<F> {
    Ok(layer_feature_loss_with_grad(a, b)?.0)
}

/// Weighted sum of per-layer losses given each layer's channel count.
pub fn combine_layer_losses(layers: &[(usize, f64)], weighting: FeatureWeighting) -> f64 {
    layers.iter().map(|&(c, l)| weighting.layer_weight(c) * l).sum()
}

/// Reconstruction loss between the stacks of the input (`sa`) and the
/// reconstruction (`sb`), together with each layer's loss.
pub fn feature_reconstruction_loss(
    sa: &FeatureStack,
    sb: &FeatureStack,
    weighting: FeatureWeighting,
) -> Result<(f64, Vec<(Tap, f64)>)> {
    let (total, per_layer, _) = feature_reconstruction_loss_with_grad(sa, sb, weighting)?;
    Ok((total, per_layer))
}

/// As [`feature_reconstruction_loss`], also returning d(total)/d(sb) per layer.
pub fn feature_reconstruction_loss_with_grad(
    sa: &FeatureStack,
    sb: &FeatureStack,
    weighting: FeatureWeighting,
) -> Result<(f64, Vec<(Tap, f64)>, Vec<(Tap, ndarray::Array4<f32>)>)> {
    if sa.taps() != sb.taps() {
        return Err(Error::Input(format!(
            "feature stacks list different layers: {:?} vs {:?}",
            sa.taps().iter().map(|t| t.name()).collect::<Vec<_>>(),
            sb.taps().iter().map(|t| t.name()).collect::<Vec<_>>()
        )));
    }
    let mut per_layer = Vec::with_capacity(sa.layers.len());
    let mut grads = Vec::with_capacity(sa.layers.len());
    let mut total = 0.0;
    for ((tap, a), (_, b)) in sa.layers.iter().zip(&sb.layers) {
        if a.dim() != b.dim() {
            return Err(Error::Input(format!(
                "layer {}: shapes {:?} and {:?} differ",
                tap.name(),
                a.dim(),
                b.dim()
            )));
        }
        let w = weighting.layer_weight(a.dim().1);
        let loss = loss_f64(a, b);
        total += w * loss;
        per_layer.push((*tap, loss));
        // d/db of w * sum((a - b)^2) / (2 * len) is w * (b - a) / len
        let scale = (w / a.len() as f64) as f32;
        let mut g = b - a;
        g.mapv_inplace(|v| v * scale);
        grads.push((*tap, g));
    }
    Ok((total, per_layer, grads))
}

/// Accumulates in f64 over f32 activations.
fn loss_f64(a: &ndarray::Array4<f32>, b: &ndarray::Array4<f32>) -> f64 {
    let sum: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    sum / (2 * a.len()) as f64
}

/// Mean squared error over every pixel, with gradient with respect to `xr`.
pub fn pixel_reconstruction_loss_with_grad<F: NdFloat, D: Dimension>(
    x: ArrayView<F, D>,
    xr: ArrayView<F, D>,
) -> Result<(F, Array<F, D>)> {
    same_shape(&x, &xr, "pixel_reconstruction_loss")?;
    if x.is_empty() {
        return Err(Error::Input("pixel_reconstruction_loss: empty batch".into()));
    }
    let count = F::from(x.len()).expect("count");
    let mut diff = &xr - &x;
    let sum = diff.iter().fold(F::zero(), |s, &d| s + d * d);
    let scale = f::<F>(2.0) / count;
    diff.mapv_inplace(|d| d * scale);
    Ok((sum / count, diff))
}

pub fn pixel_reconstruction_loss<F: NdFloat, D: Dimension>(x: ArrayView<F, D>, xr: ArrayView<F, D>) -> Result<F> {
    Ok(pixel_reconstruction_loss_with_grad(x, xr)?.0)
}

/// Critic and generator objectives plus their gradients with respect to the scores.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialLoss<F> {
    /// mean(real) - mean(fake), reported in every mode.
    pub gan: F,
    pub disc_loss: F,
    pub gen_term: F,
    pub d_disc_real: Vec<F>,
    pub d_disc_fake: Vec<F>,
    pub d_gen_fake: Vec<F>,
}

pub fn adversarial_losses<F: NdFloat>(real: &[F], fake: &[F], w: &LossWeights) -> Result<AdversarialLoss<F>> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::Input("adversarial_losses: empty score vector".into()));
    }
    let nr = F::from(real.len()).expect("count");
    let nf = F::from(fake.len()).expect("count");
    let mean = |v: &[F], n: F| v.iter().fold(F::zero(), |s, &x| s + x) / n;
    let gan = mean(real, nr) - mean(fake, nf);
    Ok(match w.adversarial_mode {
        AdversarialMode::Wasserstein => AdversarialLoss {
            gan,
            disc_loss: gan,
            gen_term: -gan,
            d_disc_real: vec![F::one() / nr; real.len()],
            d_disc_fake: vec![-F::one() / nf; fake.len()],
            d_gen_fake: vec![F::one() / nf; fake.len()],
        },
        AdversarialMode::LabelTarget => {
            let m = f::<F>(w.gan_label_magnitude);
            let two = f::<F>(2.0);
            let sq = |v: &[F], target: F, n: F| v.iter().fold(F::zero(), |s, &x| s + (x - target) * (x - target)) / n;
            AdversarialLoss {
                gan,
                disc_loss: sq(real, m, nr) + sq(fake, -m, nf),
                gen_term: sq(fake, m, nf),
                d_disc_real: real.iter().map(|&x| two * (x - m) / nr).collect(),
                d_disc_fake: fake.iter().map(|&x| two * (x + m) / nf).collect(),
                d_gen_fake: fake.iter().map(|&x| two * (x - m) / nf).collect(),
            }
        }
    })
}

/// alpha * kl + beta * rec + gan_term.
pub fn total_vae_loss(kl: f64, rec: f64, gan_term: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("kl", kl), ("rec", rec), ("gan_term", gan_term)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("total_vae_loss: {name} is {v}")));
        }
    }
    Ok(w.alpha * kl + w.beta * rec + gan_term)
}
