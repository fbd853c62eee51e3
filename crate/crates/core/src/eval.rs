//! Quantitative evaluation: multi-view latent features, linear attribute
//! classifiers and an inception-style score.

use std::path::Path;

use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::checkpoint::{encoder_from, load_checkpoint};
use crate::data::{batches, AttributeTable};
use crate::latent::{encode_means, NamedVector};
use crate::models::{Encoder, ImageBatch, PerceptualNet};
use crate::{Error, Result};

pub const VIEWS: usize = 5;

/// Five encoders whose posterior means are concatenated into one feature vector.
#[derive(Debug, Clone)]
pub struct MultiViewExtractor {
    encoders: Vec<Encoder>,
}

impl MultiViewExtractor {
    pub fn new(encoders: Vec<Encoder>) -> Result<Self> {
        if encoders.len() != VIEWS {
            return Err(Error::Config(format!("multi-view extractor needs {VIEWS} encoders, got {}", encoders.len())));
        }
        let (size, ch) = (encoders[0].config().image_size, encoders[0].config().channels);
        if let Some(e) = encoders.iter().find(|e| e.config().image_size != size || e.config().channels != ch) {
            return Err(Error::Config(format!(
                "encoders disagree on input shape: {ch}x{size}x{size} vs {}x{s}x{s}",
                e.config().channels,
                s = e.config().image_size
            )));
        }
        Ok(MultiViewExtractor { encoders })
    }

    /// Loads the encoder of each checkpoint, in the given order.
    pub fn from_checkpoints<P: AsRef<Path>>(paths: &[P]) -> Result<Self> {
        let encoders = paths.iter().map(|p| encoder_from(&load_checkpoint(p)?)).collect::<Result<Vec<_>>>()?;
        Self::new(encoders)
    }

    pub fn width(&self) -> usize {
        self.encoders.iter().map(|e| e.latent_dim()).sum()
    }

    pub fn image_size(&self) -> usize {
        self.encoders[0].config().image_size
    }

    pub fn encode(&self, x: &ImageBatch) -> Result<Array2<f32>> {
        let parts = self.encoders.iter().map(|e| encode_means(e, x)).collect::<Result<Vec<_>>>()?;
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        Ok(concatenate(Axis(1), &views).expect("equal row counts"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmConfig {
    pub reg: f64,
    pub iterations: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig { reg: 1e-4, iterations: 1000 }
    }
}

/// Linear decision rule `sign(w . x + b)` for one attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub name: String,
    pub weight: Array1<f32>,
    pub bias: f32,
    pub counts: [u64; 2],
}

impl LinearClassifier {
    pub fn decision(&self, features: ArrayView2<f32>) -> Result<Array1<f32>> {
        if features.ncols() != self.weight.len() {
            return Err(Error::Input(format!(
                "classifier {} expects {} features, got {}",
                self.name,
                self.weight.len(),
                features.ncols()
            )));
        }
        Ok(features.dot(&self.weight) + self.bias)
    }

    /// +1 where the decision value is non-negative, else -1.
    pub fn predict(&self, features: ArrayView2<f32>) -> Result<Vec<i8>> {
        Ok(self.decision(features)?.iter().map(|&d| if d >= 0.0 { 1 } else { -1 }).collect())
    }

    /// Stored as weights followed by the bias.
    pub fn to_named(&self) -> NamedVector {
        let mut values = self.weight.to_vec();
        values.push(self.bias);
        NamedVector { name: self.name.clone(), values, counts: self.counts }
    }

    pub fn from_named(v: &NamedVector) -> Result<Self> {
        let (bias, weight) = v
            .values
            .split_last()
            .ok_or_else(|| Error::Format(format!("classifier {:?} has no bias", v.name)))?;
        if v.values.iter().any(|x| !x.is_finite()) {
            return Err(Error::Format(format!("classifier {:?} has non-finite parameters", v.name)));
        }
        Ok(LinearClassifier { name: v.name.clone(), weight: Array1::from(weight.to_vec()), bias: *bias, counts: v.counts })
    }
}

fn hinge_objective(xs: &Array2<f64>, y: &Array1<f64>, w: &Array1<f64>, b: f64, reg: f64) -> (f64, Array1<f64>) {
    let margins = (xs.dot(w) + b) * y;
    let hinge: f64 = margins.iter().map(|m| (1.0 - m).max(0.0)).sum::<f64>() / y.len() as f64;
    (0.5 * reg * w.dot(w) + hinge, margins)
}

/// L2-regularized hinge loss minimized by full-batch subgradient descent with
/// step `eta0 / sqrt(t)`, keeping the iterate with the lowest objective.
/// Features are standardized internally; the scaling is folded into the result.
pub fn train_linear_classifier(
    features: ArrayView2<f32>,
    labels: &[i8],
    name: &str,
    cfg: &SvmConfig,
) -> Result<LinearClassifier> {
    let (n, d) = features.dim();
    if labels.len() != n {
        return Err(Error::Input(format!("{n} feature rows but {} labels", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l != 1 && l != -1) {
        return Err(Error::Input(format!("labels must be +1 or -1, got {bad}")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == n {
        return Err(Error::Input(format!("attribute {name}: labels contain a single class")));
    }
    if !(cfg.reg >= 0.0) || cfg.iterations == 0 {
        return Err(Error::Config("svm needs reg >= 0 and at least one iteration".into()));
    }
    let x = features.mapv(f64::from);
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let std = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let xs = (&x - &mean.view().insert_axis(Axis(0))) / &std.view().insert_axis(Axis(0));
    let y = Array1::from_iter(labels.iter().map(|&l| l as f64));

    let mean_sq = xs.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let eta0 = 1.0 / (mean_sq + 1.0);
    let mut w = Array1::<f64>::zeros(d);
    let mut b = 0.0f64;
    let (mut best_obj, mut margins) = hinge_objective(&xs, &y, &w, b, cfg.reg);
    let (mut best_w, mut best_b) = (w.clone(), b);
    for t in 1..=cfg.iterations {
        // subgradient of the mean hinge over margin violators
        let coef = Array1::from_iter(y.iter().zip(&margins).map(|(&yi, &m)| if m < 1.0 { -yi } else { 0.0 })) / n as f64;
        let gw = xs.t().dot(&coef) + &(&w * cfg.reg);
        let gb = coef.sum();
        let eta = eta0 / (t as f64).sqrt();
        w.scaled_add(-eta, &gw);
        b -= eta * gb;
        let (obj, m) = hinge_objective(&xs, &y, &w, b, cfg.reg);
        margins = m;
        if obj < best_obj {
            best_obj = obj;
            best_w.assign(&w);
            best_b = b;
        }
    }
    let w_raw = &best_w / &std;
    let b_raw = best_b - w_raw.dot(&mean);
    let weight = w_raw.mapv(|v| v as f32);
    if weight.iter().any(|v| !v.is_finite()) || !b_raw.is_finite() {
        return Err(Error::Numeric(format!("classifier {name} diverged")));
    }
    Ok(LinearClassifier {
        name: name.to_string(),
        weight,
        bias: b_raw as f32,
        counts: [pos as u64, (n - pos) as u64],
    })
}

/// Accuracy of always predicting the more frequent label.
pub fn majority_baseline(labels: &[i8]) -> f64 {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    pos.max(labels.len() - pos) as f64 / labels.len().max(1) as f64
}

pub fn accuracy(pred: &[i8], truth: &[i8]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

/// Trains one classifier per attribute on rows `ids` of `table`.
pub fn train_attribute_classifiers(
    features: ArrayView2<f32>,
    ids: &[String],
    table: &AttributeTable,
    attributes: &[String],
    cfg: &SvmConfig,
) -> Result<Vec<LinearClassifier>> {
    check_alignment(features, ids)?;
    let refs: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
    attributes
        .iter()
        .map(|a| train_linear_classifier(features, &table.labels(&refs, a)?, a, cfg))
        .collect()
}

fn check_alignment(features: ArrayView2<f32>, ids: &[String]) -> Result<()> {
    if features.nrows() != ids.len() {
        return Err(Error::Input(format!("{} feature rows for {} ids", features.nrows(), ids.len())));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeReport {
    pub rows: Vec<(String, f64)>,
    pub average: f64,
}

impl AttributeReport {
    pub fn accuracy(&self, attr: &str) -> Option<f64> {
        self.rows.iter().find(|(a, _)| a == attr).map(|(_, v)| *v)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("attribute,accuracy\n");
        for (a, v) in &self.rows {
            s.push_str(&format!("{a},{v:.6}\n"));
        }
        s.push_str(&format!("average,{:.6}\n", self.average));
        s
    }
}

/// Per-attribute accuracy of `classifiers` on `features`, whose rows are `ids`.
pub fn evaluate_attributes(
    classifiers: &[LinearClassifier],
    features: ArrayView2<f32>,
    ids: &[String],
    table: &AttributeTable,
) -> Result<AttributeReport> {
    check_alignment(features, ids)?;
    if classifiers.is_empty() {
        return Err(Error::Input("no classifiers to evaluate".into()));
    }
    let refs: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
    let mut rows = Vec::with_capacity(classifiers.len());
    for c in classifiers {
        let truth = table.labels(&refs, &c.name)?;
        rows.push((c.name.clone(), accuracy(&c.predict(features)?, &truth)));
    }
    let average = rows.iter().map(|(_, v)| v).sum::<f64>() / rows.len() as f64;
    Ok(AttributeReport { rows, average })
}

/// Frozen image classifier used for scoring generated images.
#[derive(Debug, Clone)]
pub struct ScoreClassifier {
    net: PerceptualNet,
}

impl ScoreClassifier {
    pub fn new(mut net: PerceptualNet) -> Self {
        net.freeze();
        ScoreClassifier { net }
    }

    pub fn classes(&self) -> usize {
        self.net.classes()
    }

    pub fn net(&self) -> &PerceptualNet {
        &self.net
    }

    pub fn probabilities(&self, x: &ImageBatch) -> Result<Array2<f64>> {
        let n = x.len_of(Axis(0));
        let mut out = Array2::<f64>::zeros((n, self.classes()));
        let order: Vec<usize> = (0..n).collect();
        for chunk in batches(&order, 64, true) {
            let slice = ndarray::s![chunk[0]..chunk[0] + chunk.len(), .., .., ..];
            let p = self.net.probabilities(&x.slice(slice).to_owned())?;
            out.slice_mut(ndarray::s![chunk[0]..chunk[0] + chunk.len(), ..]).assign(&p.mapv(f64::from));
        }
        Ok(out)
    }
}

/// `exp(mean_i KL(p_i || mean_j p_j))` over probability rows.
pub fn inception_score_from_probs(probs: ArrayView2<f64>) -> Result<f64> {
    let (n, k) = probs.dim();
    if n == 0 || k == 0 {
        return Err(Error::Input("inception-style score needs at least one image and class".into()));
    }
    let marginal = probs.mean_axis(Axis(0)).expect("nonempty");
    let kl_row = |p: ArrayView1<f64>| -> f64 {
        p.iter().zip(&marginal).filter(|(&pi, _)| pi > 0.0).map(|(&pi, &mi)| pi * (pi / mi).ln()).sum()
    };
    let mean_kl = probs.rows().into_iter().map(kl_row).sum::<f64>() / n as f64;
    // rounding can step a hair outside the attainable range
    Ok(mean_kl.exp().clamp(1.0, k as f64))
}

/// Inception-style score over the first `n` images.
pub fn inception_style_score(sc: &ScoreClassifier, images: &ImageBatch, n: usize) -> Result<f64> {
    let available = images.len_of(Axis(0));
    if n == 0 {
        return Err(Error::Input("inception-style score needs n > 0".into()));
    }
    if n > available {
        return Err(Error::Input(format!("asked to score {n} images but only {available} given")));
    }
    let probs = sc.probabilities(&images.slice(ndarray::s![..n, .., .., ..]).to_owned())?;
    inception_score_from_probs(probs.view())
}
