//! Flat `key = value` run configuration.
//!
//! Precedence, lowest to highest: built-in defaults, the `--config` file,
//! then `--set key=value` flags in the order given. Unknown keys are usage
//! errors. Lines starting with `#` and blank lines are ignored.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use cmmp_core::encoders::{DualEncoderConfig, ImageEncoderConfig, PretrainConfig, TextEncoderConfig};
use cmmp_core::eval::EvalConfig;
use cmmp_core::frontend::FilterConfig;
use cmmp_core::model::ModelConfig;
use cmmp_core::optim::AdamWConfig;
use cmmp_core::prompts::PromptConfig;
use cmmp_core::synth::SynthConfig;
use cmmp_core::train::{CcScope, TrainConfig};
use cmmp_core::zeroshot::{HoiInventory, ZeroShotSetting};
use sha2::{Digest, Sha256};

use crate::error::{usage, CliError, Result};

/// Every key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "global seed; every stage derives its randomness from it"),
    ("synth.num_verbs", "8", "verbs in the synthetic grid"),
    ("synth.num_objects", "8", "object classes in the synthetic grid (person excluded)"),
    ("synth.image_size", "64", "square image side, pixels"),
    ("synth.train_images", "512", "training scenes"),
    ("synth.test_images", "256", "test scenes"),
    ("synth.pretrain_images", "1024", "captioned scenes for encoder pretraining"),
    ("synth.max_distractors", "2", "non-interacting objects per scene, at most"),
    ("synth.box_jitter", "1.0", "detection box jitter, pixels (std)"),
    ("synth.score_noise", "0.1", "detection score noise (std)"),
    ("synth.frequency_spread", "0.8", "log-normal spread of training composition frequencies"),
    ("encoder.image_size", "64", "encoder input side, pixels"),
    ("encoder.patch_size", "8", "patch side, pixels"),
    ("encoder.image_width", "64", "image transformer width"),
    ("encoder.image_blocks", "2", "image transformer blocks"),
    ("encoder.image_heads", "4", "image attention heads"),
    ("encoder.image_mlp_ratio", "2", "image MLP expansion"),
    ("encoder.injection_blocks", "0,1", "blocks followed by vision-prompt injection"),
    ("encoder.text_width", "64", "text transformer width"),
    ("encoder.text_blocks", "2", "text transformer blocks"),
    ("encoder.text_heads", "4", "text attention heads"),
    ("encoder.text_mlp_ratio", "2", "text MLP expansion"),
    ("encoder.context_length", "32", "maximum text tokens including markers"),
    ("encoder.embed_dim", "64", "joint embedding width"),
    ("pretrain.epochs", "8", "contrastive pretraining epochs"),
    ("pretrain.batch_size", "32", "image-caption pairs per step"),
    ("pretrain.lr", "0.002", "pretraining learning rate"),
    ("pretrain.weight_decay", "0.0001", "pretraining weight decay"),
    ("pretrain.clip_norm", "1.0", "gradient clipping norm (0 disables)"),
    ("pretrain.warmup_steps", "20", "linear warmup steps"),
    ("pretrain.max_soft_prefix", "16", "zero soft tokens sampled before captions, at most"),
    ("prompts.d_ins", "64", "instance prompt width"),
    ("prompts.spi_layers", "2", "spatial prior integration decoder layers"),
    ("prompts.spi_heads", "4", "attention heads in prompt modules"),
    ("prompts.context_length", "16", "learnable language context tokens S"),
    ("prompts.context_init_std", "0.02", "initial std of the language context"),
    ("gsp.k", "16", "global spatial patterns K"),
    ("split.setting", "nf-uc", "zero-shot setting: uc, rf-uc, nf-uc, uo or uv"),
    ("split.count", "12", "held-out compositions (uc family), verbs (uv) or objects (uo)"),
    ("model.roi_resolution", "3", "ROI-align output resolution R"),
    ("model.tau_init", "10", "initial logit temperature"),
    ("model.lambda", "2.8", "detector-confidence exponent at inference (> 1)"),
    ("filter.person_threshold", "0.2", "minimum person detection score"),
    ("filter.object_threshold", "0.2", "minimum object detection score"),
    ("filter.max_per_image", "15", "detections kept per image"),
    ("train.epochs", "10", "prompt training epochs"),
    ("train.batch_size", "8", "images per step"),
    ("train.lr", "0.001", "learning rate"),
    ("train.weight_decay", "0.0001", "decoupled weight decay"),
    ("train.warmup_steps", "0", "linear warmup steps"),
    ("train.lambda_cc", "1.0", "weight of the consistency loss"),
    ("train.cc_scope", "seen", "verbs in the consistency loss: seen or all"),
    ("train.gamma", "2", "focal loss focusing parameter"),
    ("train.alpha_f", "0.25", "focal loss balance"),
    ("train.target_iou", "0.5", "IoU above which a detected pair inherits an annotated verb"),
    ("eval.iou_threshold", "0.5", "IoU above which a prediction matches ground truth (both boxes)"),
    ("eval.exclude_no_interaction", "true", "leave no-interaction compositions out of mAP"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect() }
    }
}

/// Whether `key` is `seed` or belongs to one of `sections`.
pub fn in_sections(key: &str, sections: &[&str]) -> bool {
    key == "seed" || key.split_once('.').is_some_and(|(s, _)| sections.contains(&s))
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| usage!("config key {key}: cannot parse {value:?}"))
}

impl RunConfig {
    /// Defaults, then `file`, then `overrides` (`key=value`).
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            cfg.merge_text(&text, &path.display().to_string())?;
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| usage!("override {o:?} is not key=value"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| usage!("{origin}:{}: expected key = value", n + 1))?;
            self.set(k.trim(), v.trim()).map_err(|e| usage!("{origin}:{}: {e}", n + 1))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(usage!("unknown config key {key:?}")),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undeclared config key {key}"))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let v: f64 = parse(key, self.get(key))?;
        if !v.is_finite() {
            return Err(usage!("config key {key} must be finite"));
        }
        Ok(v)
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        parse(key, self.get(key))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        parse(key, self.get(key))
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        parse(key, self.get(key))
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        let v = self.get(key).trim();
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',').map(|p| parse(key, p)).collect()
    }

    /// Canonical `key=value` lines, sorted by key.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Effective values, each preceded by its documentation.
    pub fn documented(&self) -> String {
        let mut s = String::from("# precedence: defaults < --config file < --set flags (in order)\n");
        for (k, _, doc) in KEYS {
            s.push_str(&format!("# {doc}\n{k} = {}\n", self.get(k)));
        }
        s
    }

    pub fn as_map(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// SHA-256 over the canonical lines of `seed` and every key in the given
    /// sections (the part before the first dot).
    pub fn hash(&self, sections: &[&str]) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.values.iter().filter(|(k, _)| in_sections(k, sections)) {
            h.update(format!("{k}={v}\n"));
        }
        hex::encode(h.finalize())
    }

    /// Builds every typed configuration so range errors surface before any
    /// work starts.
    pub fn validate(&self) -> Result<()> {
        self.synth()?.validate()?;
        let enc = self.encoder()?;
        enc.image.validate()?;
        enc.text.validate()?;
        self.pretrain()?;
        self.model(0)?.validate()?;
        self.train()?.validate()?;
        self.setting()?;
        self.usize("split.count")?;
        if self.usize("gsp.k")? == 0 {
            return Err(usage!("gsp.k must be positive"));
        }
        self.eval_iou()?;
        self.bool("eval.exclude_no_interaction")?;
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.u64("seed")
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        Ok(SynthConfig {
            num_verbs: self.usize("synth.num_verbs")?,
            num_objects: self.usize("synth.num_objects")?,
            image_size: self.u64("synth.image_size")? as u32,
            train_images: self.usize("synth.train_images")?,
            test_images: self.usize("synth.test_images")?,
            pretrain_images: self.usize("synth.pretrain_images")?,
            max_distractors: self.usize("synth.max_distractors")?,
            box_jitter: self.f64("synth.box_jitter")?,
            score_noise: self.f64("synth.score_noise")?,
            frequency_spread: self.f64("synth.frequency_spread")?,
            seed: self.seed()?,
        })
    }

    pub fn encoder(&self) -> Result<DualEncoderConfig> {
        Ok(DualEncoderConfig {
            image: ImageEncoderConfig {
                image_size: self.u64("encoder.image_size")? as u32,
                patch_size: self.u64("encoder.patch_size")? as u32,
                width: self.usize("encoder.image_width")?,
                blocks: self.usize("encoder.image_blocks")?,
                heads: self.usize("encoder.image_heads")?,
                mlp_ratio: self.usize("encoder.image_mlp_ratio")?,
                injection_blocks: self.usize_list("encoder.injection_blocks")?,
            },
            text: TextEncoderConfig {
                context_length: self.usize("encoder.context_length")?,
                width: self.usize("encoder.text_width")?,
                blocks: self.usize("encoder.text_blocks")?,
                heads: self.usize("encoder.text_heads")?,
                mlp_ratio: self.usize("encoder.text_mlp_ratio")?,
            },
            embed_dim: self.usize("encoder.embed_dim")?,
        })
    }

    pub fn pretrain(&self) -> Result<PretrainConfig> {
        let clip = self.f64("pretrain.clip_norm")?;
        let cfg = PretrainConfig {
            epochs: self.usize("pretrain.epochs")?,
            batch_size: self.usize("pretrain.batch_size")?,
            optimizer: AdamWConfig {
                lr: self.f64("pretrain.lr")?,
                weight_decay: self.f64("pretrain.weight_decay")?,
                clip_norm: (clip > 0.0).then_some(clip),
                ..AdamWConfig::default()
            },
            warmup_steps: self.usize("pretrain.warmup_steps")?,
            max_soft_prefix: self.usize("pretrain.max_soft_prefix")?,
            seed: self.seed()?,
        };
        if cfg.batch_size < 2 || cfg.optimizer.lr <= 0.0 {
            return Err(usage!("pretraining needs batch_size >= 2 and a positive learning rate"));
        }
        Ok(cfg)
    }

    /// Model configuration; `person` is the person label of the inventory.
    pub fn model(&self, person: u32) -> Result<ModelConfig> {
        Ok(ModelConfig {
            prompts: PromptConfig {
                d_ins: self.usize("prompts.d_ins")?,
                spi_layers: self.usize("prompts.spi_layers")?,
                spi_heads: self.usize("prompts.spi_heads")?,
                context_length: self.usize("prompts.context_length")?,
                context_init_std: self.f64("prompts.context_init_std")?,
            },
            roi_resolution: self.usize("model.roi_resolution")?,
            tau_init: self.f64("model.tau_init")?,
            lambda: self.f64("model.lambda")?,
            filter: FilterConfig {
                person_threshold: self.f64("filter.person_threshold")?,
                object_threshold: self.f64("filter.object_threshold")?,
                max_per_image: self.usize("filter.max_per_image")?,
                person_label: person,
            },
            seed: self.seed()?,
        })
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cc_scope = match self.get("train.cc_scope") {
            "seen" => CcScope::Seen,
            "all" => CcScope::All,
            other => return Err(usage!("train.cc_scope must be seen or all, got {other:?}")),
        };
        Ok(TrainConfig {
            epochs: self.usize("train.epochs")?,
            batch_size: self.usize("train.batch_size")?,
            optimizer: AdamWConfig { lr: self.f64("train.lr")?, weight_decay: self.f64("train.weight_decay")?, ..AdamWConfig::default() },
            warmup_steps: self.usize("train.warmup_steps")?,
            lambda_cc: self.f64("train.lambda_cc")?,
            gamma: self.f64("train.gamma")?,
            alpha_f: self.f64("train.alpha_f")?,
            cc_scope,
            target_iou: self.f64("train.target_iou")?,
            seed: self.seed()?,
        })
    }

    pub fn setting(&self) -> Result<ZeroShotSetting> {
        self.get("split.setting").parse().map_err(|_| usage!("unknown split.setting {:?}", self.get("split.setting")))
    }

    fn eval_iou(&self) -> Result<f64> {
        let t = self.f64("eval.iou_threshold")?;
        if !(0.0..1.0).contains(&t) {
            return Err(usage!("eval.iou_threshold must lie in [0, 1)"));
        }
        Ok(t)
    }

    pub fn eval(&self, inv: &HoiInventory) -> Result<EvalConfig> {
        let mut cfg =
            if self.bool("eval.exclude_no_interaction")? { EvalConfig::excluding_no_interaction(inv) } else { EvalConfig::default() };
        cfg.iou_threshold = self.eval_iou()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_build() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.encoder().unwrap(), DualEncoderConfig::desk());
        assert_eq!(c.train().unwrap().lambda_cc, 1.0);
        assert_eq!(c.model(0).unwrap().lambda, 2.8);
    }

    #[test]
    fn file_then_flags_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "# comment\ntrain.epochs = 3\n\nseed=5\n").unwrap();
        let c = RunConfig::load(Some(&p), &["train.epochs=4".into()]).unwrap();
        assert_eq!(c.usize("train.epochs").unwrap(), 4);
        assert_eq!(c.seed().unwrap(), 5);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("train.epoch", "1"), Err(CliError::Usage(_))));
        let e = RunConfig::load(None, &["model.lambda=1.0".into()]).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        let e = RunConfig::load(None, &["train.lr=abc".into()]).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert!(RunConfig::load(None, &["noequals".into()]).is_err());
    }

    #[test]
    fn hash_tracks_only_selected_sections() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.set("train.epochs", "99").unwrap();
        assert_eq!(a.hash(&["synth"]), b.hash(&["synth"]));
        assert_ne!(a.hash(&["train"]), b.hash(&["train"]));
        b.set("seed", "1").unwrap();
        assert_ne!(a.hash(&["synth"]), b.hash(&["synth"]));
    }

    #[test]
    fn every_key_is_documented_once() {
        let mut names: Vec<_> = KEYS.iter().map(|k| k.0).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), KEYS.len());
        assert!(KEYS.iter().all(|k| !k.2.is_empty()));
    }
}
