//! Run configuration: presets, a flat `section.key = value` file, and overrides.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use vaewgan::pretrain::PretrainConfig;
use vaewgan::{AdversarialMode, FeatureWeighting, ModelConfig, Objective, TrainConfig};

use crate::usage;

/// Every key accepted in a config file or by `--set`.
pub const KEYS: &[&str] = &[
    "preset",
    "model.image_size",
    "model.channels",
    "model.latent_dim",
    "model.encoder_widths",
    "model.decoder_widths",
    "model.disc_widths",
    "model.perceptual_widths",
    "model.perceptual_input_scale",
    "model.leaky_slope",
    "model.clip_value",
    "train.batch_size",
    "train.epochs",
    "train.lr",
    "train.lr_decay",
    "train.alpha",
    "train.beta",
    "train.gan_label_magnitude",
    "train.adversarial_mode",
    "train.feature_weighting",
    "train.clip_value",
    "train.seed",
    "train.loss_taps",
    "train.snapshot_every",
    "train.objective",
    "train.adam_beta1",
    "train.adam_beta2",
    "train.max_steps",
    "train.holdout",
    "pretrain.epochs",
    "pretrain.batch_size",
    "pretrain.lr",
    "pretrain.samples",
    "paths.data_root",
    "paths.out",
    "paths.perceptual",
    "paths.resume",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub data_root: Option<PathBuf>,
    pub out: PathBuf,
    pub perceptual: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

/// Everything `train` needs, merged from preset, file and command line.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub pretrain_samples: usize,
    pub max_steps: Option<u64>,
    /// Images held out of training (written to `test_ids.txt`).
    pub holdout: usize,
    pub paths: Paths,
    seed_set: bool,
}

impl RunConfig {
    pub fn preset(name: &str) -> anyhow::Result<Self> {
        let (model, train) = match name {
            "paper" => (ModelConfig::default(), TrainConfig::default()),
            "desk" => (ModelConfig::desk(), TrainConfig::desk()),
            other => return Err(usage(format!("unknown preset {other:?}; expected paper or desk"))),
        };
        Ok(RunConfig {
            model,
            train,
            pretrain: PretrainConfig::default(),
            pretrain_samples: 3000,
            max_steps: None,
            holdout: 0,
            paths: Paths {
                data_root: None,
                out: PathBuf::from("out"),
                perceptual: None,
                resume: None,
            },
            seed_set: false,
        })
    }

    /// Preset (from the file's `preset` line or `preset`), then file entries in
    /// order, then `overrides` in order.
    pub fn build(file: Option<&Path>, preset: Option<&str>, overrides: &[(String, String)]) -> anyhow::Result<Self> {
        let entries = match file {
            Some(p) => parse_file(p)?,
            None => Vec::new(),
        };
        let from_file = entries.iter().find(|(k, _)| k == "preset").map(|(_, v)| v.as_str());
        let from_cli = overrides.iter().rev().find(|(k, _)| k == "preset").map(|(_, v)| v.as_str());
        let mut cfg = RunConfig::preset(from_cli.or(preset).or(from_file).unwrap_or("paper"))?;
        for (k, v) in entries.iter().chain(overrides) {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }

    /// Applies `VWGN_SEED` when neither the file nor the command line set a seed.
    pub fn seed_fallback(&mut self, env_seed: Option<u64>) {
        if let (false, Some(s)) = (self.seed_set, env_seed) {
            self.train.seed = s;
            self.pretrain.seed = s;
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> anyhow::Result<()> {
        let v = value.trim();
        let bad = |e: String| usage(format!("{key} = {v:?}: {e}"));
        match key {
            "model.image_size" => self.model.image_size = typed(key, v)?,
            "model.channels" => self.model.channels = typed(key, v)?,
            "model.latent_dim" => self.model.latent_dim = typed(key, v)?,
            "model.encoder_widths" => self.model.encoder_widths = list(key, v)?,
            "model.decoder_widths" => self.model.decoder_widths = list(key, v)?,
            "model.disc_widths" => self.model.disc_widths = list(key, v)?,
            "model.perceptual_widths" => self.model.perceptual_widths = list(key, v)?,
            "model.perceptual_input_scale" => self.model.perceptual_input_scale = typed(key, v)?,
            "model.leaky_slope" => self.model.leaky_slope = typed(key, v)?,
            "model.clip_value" | "train.clip_value" => {
                let c: f32 = typed(key, v)?;
                self.model.clip_value = c;
                self.train.clip_value = c;
            }
            "train.batch_size" => self.train.batch_size = typed(key, v)?,
            "train.epochs" => self.train.epochs = typed(key, v)?,
            "train.lr" => self.train.lr = typed(key, v)?,
            "train.lr_decay" => self.train.lr_decay = typed(key, v)?,
            "train.alpha" => self.train.weights.alpha = typed(key, v)?,
            "train.beta" => self.train.weights.beta = typed(key, v)?,
            "train.gan_label_magnitude" => self.train.weights.gan_label_magnitude = typed(key, v)?,
            "train.adversarial_mode" => {
                self.train.weights.adversarial_mode = match v {
                    "wasserstein" => AdversarialMode::Wasserstein,
                    "label_target" => AdversarialMode::LabelTarget,
                    _ => return Err(bad("expected wasserstein or label_target".into())),
                }
            }
            "train.feature_weighting" => {
                self.train.weights.feature_weighting = match v {
                    "uniform" => FeatureWeighting::Uniform,
                    "channel_scaled" => FeatureWeighting::default(),
                    _ => match v.strip_prefix("channel_scaled:") {
                        Some(n) => FeatureWeighting::ChannelScaled { numerator: typed(key, n)? },
                        None => return Err(bad("expected uniform, channel_scaled or channel_scaled:<numerator>".into())),
                    },
                }
            }
            "train.seed" => {
                let s: u64 = typed(key, v)?;
                self.train.seed = s;
                self.pretrain.seed = s;
                self.seed_set = true;
            }
            "train.loss_taps" => {
                self.train.loss_taps = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
            }
            "train.snapshot_every" => self.train.snapshot_every = typed(key, v)?,
            "train.objective" => {
                self.train.objective = match v {
                    "vae_wgan" => Objective::VaeWgan,
                    "feature_vae" => Objective::FeatureVae,
                    "pixel_vae" => Objective::PixelVae,
                    _ => return Err(bad("expected vae_wgan, feature_vae or pixel_vae".into())),
                }
            }
            "train.adam_beta1" => self.train.adam_beta1 = typed(key, v)?,
            "train.adam_beta2" => self.train.adam_beta2 = typed(key, v)?,
            "train.max_steps" => self.max_steps = Some(typed(key, v)?),
            "train.holdout" => self.holdout = typed(key, v)?,
            "pretrain.epochs" => self.pretrain.epochs = typed(key, v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = typed(key, v)?,
            "pretrain.lr" => self.pretrain.lr = typed(key, v)?,
            "pretrain.samples" => self.pretrain_samples = typed(key, v)?,
            "paths.data_root" => self.paths.data_root = Some(PathBuf::from(v)),
            "paths.out" => self.paths.out = PathBuf::from(v),
            "paths.perceptual" => self.paths.perceptual = Some(PathBuf::from(v)),
            "paths.resume" => self.paths.resume = Some(PathBuf::from(v)),
            _ => return Err(usage(format!("unknown config key {key:?}; known keys: {}", KEYS.join(", ")))),
        }
        Ok(())
    }

    /// Checks configs and referenced paths before any work starts.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate().map_err(|e| usage(e.to_string()))?;
        self.train.validate().map_err(|e| usage(e.to_string()))?;
        match &self.paths.data_root {
            None => return Err(usage("no data root given (--data or paths.data_root)".into())),
            Some(p) if !p.is_dir() => {
                return Err(usage(format!("data root {} does not exist or is not a directory", p.display())))
            }
            _ => {}
        }
        for p in [&self.paths.perceptual, &self.paths.resume].into_iter().flatten() {
            if !p.is_file() {
                return Err(usage(format!("file {} does not exist", p.display())));
            }
        }
        if self.pretrain_samples == 0 && self.paths.perceptual.is_none() && self.paths.resume.is_none() {
            return Err(usage("pretrain.samples must be at least 1".into()));
        }
        Ok(())
    }
}

fn typed<T: FromStr>(key: &str, v: &str) -> anyhow::Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| usage(format!("{key} = {v:?}: {e}")))
}

fn list(key: &str, v: &str) -> anyhow::Result<Vec<usize>> {
    v.split(',').map(|s| typed(key, s.trim())).collect()
}

/// `key = value` lines with `#` comments. Keys are checked when applied.
pub fn parse_text(text: &str, origin: &str) -> anyhow::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(usage(format!("{origin}:{}: expected `section.key = value`, got {raw:?}", i + 1)));
        };
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(usage(format!("{origin}:{}: unknown key {k:?}", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_file(path: &Path) -> anyhow::Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_text(&text, &path.display().to_string())
}

/// Splits a `--set key=value` argument.
pub fn parse_override(s: &str) -> anyhow::Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) => Ok((k.trim().to_string(), v.trim().to_string())),
        None => Err(usage(format!("--set expects key=value, got {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let entries = parse_text("preset = desk\n# comment\ntrain.epochs = 3\nmodel.latent_dim=20 # trailing\n", "t").unwrap();
        let mut cfg = RunConfig::preset("desk").unwrap();
        for (k, v) in &entries[1..] {
            cfg.set(k, v).unwrap();
        }
        cfg.set("train.epochs", "4").unwrap();
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.model.latent_dim, 20);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.model.encoder_widths, vec![8, 16, 32, 64]);
    }

    #[test]
    fn bad_lines_name_the_line() {
        let e = parse_text("train.epochs = 3\nnonsense\n", "cfg.txt").unwrap_err().to_string();
        assert!(e.contains("cfg.txt:2"), "{e}");
        let e = parse_text("train.epoch = 3\n", "cfg.txt").unwrap_err().to_string();
        assert!(e.contains("unknown key"), "{e}");
    }

    #[test]
    fn typed_values() {
        let mut cfg = RunConfig::preset("paper").unwrap();
        cfg.set("train.loss_taps", "relu3_1").unwrap();
        assert_eq!(cfg.train.loss_taps, vec!["relu3_1".to_string()]);
        cfg.set("train.clip_value", "0.02").unwrap();
        assert_eq!((cfg.model.clip_value, cfg.train.clip_value), (0.02, 0.02));
        cfg.set("train.feature_weighting", "channel_scaled:50").unwrap();
        assert_eq!(cfg.train.weights.feature_weighting, FeatureWeighting::ChannelScaled { numerator: 50.0 });
        assert!(cfg.set("train.epochs", "many").is_err());
        assert!(cfg.set("train.objective", "gan").is_err());
    }

    #[test]
    fn seed_precedence() {
        let mut cfg = RunConfig::preset("paper").unwrap();
        cfg.seed_fallback(Some(9));
        assert_eq!(cfg.train.seed, 9);
        let mut cfg = RunConfig::preset("paper").unwrap();
        cfg.set("train.seed", "3").unwrap();
        cfg.seed_fallback(Some(9));
        assert_eq!(cfg.train.seed, 3);
    }
}
