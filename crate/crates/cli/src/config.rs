//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are an error so a
//! typo never silently falls back to a default.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use tempseg_core::backbone::BackboneConfig;
use tempseg_core::decoder::DecoderConfig;
use tempseg_core::infer::{Admission, InferenceConfig};
use tempseg_core::losses::LossConfig;
use tempseg_core::train::TrainConfig;
use tempseg_core::{ModelConfig, Target};
use thiserror::Error;

#[derive(Debug, Error)]
#[error("config error: {0}")]
pub struct ConfigError(pub String);

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    // model
    pub image_size: usize,
    pub backbone_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub decoder_out: usize,
    pub heads: usize,
    pub inner_width: usize,
    pub ffn_hidden: usize,
    pub joint_kernel: bool,
    // data
    pub sequences: usize,
    pub frames: usize,
    // training
    pub target: Target,
    pub epochs: u64,
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub w_dice: f64,
    pub w_bce: f64,
    pub w_mse: f64,
    pub interval: usize,
    pub augment: bool,
    pub shadow_probability: f64,
    pub checkpoint_every: u64,
    // inference
    pub memory_capacity: usize,
    pub memory_threshold: f64,
    pub admission: Admission,
    // baseline
    pub baseline_level: f64,
    pub seed: u64,
    // paths
    #[serde(skip)]
    pub dataset: PathBuf,
    #[serde(skip)]
    pub out: PathBuf,
    #[serde(skip)]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip)]
    pub predictions: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::desk();
        let t = TrainConfig::default();
        let i = InferenceConfig::default();
        RunConfig {
            image_size: m.image_size,
            backbone_widths: m.backbone.widths.clone(),
            decoder_widths: m.decoder.widths.clone(),
            decoder_out: m.decoder.out_width,
            heads: m.heads,
            inner_width: m.inner_width,
            ffn_hidden: m.ffn_hidden,
            joint_kernel: m.decoder.joint_kernel,
            sequences: 16,
            frames: 8,
            target: t.target,
            epochs: t.epochs,
            max_steps: t.max_steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            w_dice: t.loss.w_dice,
            w_bce: t.loss.w_bce,
            w_mse: t.loss.w_mse,
            interval: t.interval,
            augment: t.augment,
            shadow_probability: t.shadow_probability,
            checkpoint_every: t.checkpoint_every,
            memory_capacity: i.memory_capacity,
            memory_threshold: i.memory_threshold,
            admission: i.admission,
            baseline_level: tempseg_core::cluster::DEFAULT_LEVEL,
            seed: 0,
            dataset: PathBuf::from("data"),
            out: PathBuf::from("out"),
            checkpoint: None,
            predictions: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| bad(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>, ConfigError> {
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn optional_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key.trim() {
            "image_size" => self.image_size = parse(key, v)?,
            "backbone_widths" => self.backbone_widths = parse_list(key, v)?,
            "decoder_widths" => self.decoder_widths = parse_list(key, v)?,
            "decoder_out" => self.decoder_out = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "inner_width" => self.inner_width = parse(key, v)?,
            "ffn_hidden" => self.ffn_hidden = parse(key, v)?,
            "joint_kernel" => self.joint_kernel = parse(key, v)?,
            "sequences" => self.sequences = parse(key, v)?,
            "frames" => self.frames = parse(key, v)?,
            "target" => self.target = v.parse().map_err(|e| bad(format!("{e}")))?,
            "epochs" => self.epochs = parse(key, v)?,
            "max_steps" => self.max_steps = if v.is_empty() { None } else { Some(parse(key, v)?) },
            "batch_size" => self.batch_size = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "w_dice" => self.w_dice = parse(key, v)?,
            "w_bce" => self.w_bce = parse(key, v)?,
            "w_mse" => self.w_mse = parse(key, v)?,
            "interval" => self.interval = parse(key, v)?,
            "augment" => self.augment = parse(key, v)?,
            "shadow_probability" => self.shadow_probability = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "memory_capacity" => self.memory_capacity = parse(key, v)?,
            "memory_threshold" => self.memory_threshold = parse(key, v)?,
            "admission" => {
                self.admission = match v {
                    "self_dice" => Admission::SelfDice,
                    "truth" => Admission::Truth,
                    _ => return Err(bad(format!("admission: {v:?} is not self_dice | truth"))),
                }
            }
            "baseline_level" => self.baseline_level = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "dataset" => self.dataset = PathBuf::from(v),
            "out" => self.out = PathBuf::from(v),
            "checkpoint" => self.checkpoint = optional_path(v),
            "predictions" => self.predictions = optional_path(v),
            other => return Err(bad(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            cfg.set(k, v).map_err(|e| bad(format!("line {}: {}", n + 1, e.0)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    /// Renders every key back to the file format.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut m = BTreeMap::new();
        m.insert("image_size", self.image_size.to_string());
        m.insert("backbone_widths", list(&self.backbone_widths));
        m.insert("decoder_widths", list(&self.decoder_widths));
        m.insert("decoder_out", self.decoder_out.to_string());
        m.insert("heads", self.heads.to_string());
        m.insert("inner_width", self.inner_width.to_string());
        m.insert("ffn_hidden", self.ffn_hidden.to_string());
        m.insert("joint_kernel", self.joint_kernel.to_string());
        m.insert("sequences", self.sequences.to_string());
        m.insert("frames", self.frames.to_string());
        m.insert("target", self.target.to_string());
        m.insert("epochs", self.epochs.to_string());
        m.insert("max_steps", self.max_steps.map(|s| s.to_string()).unwrap_or_default());
        m.insert("batch_size", self.batch_size.to_string());
        m.insert("learning_rate", self.learning_rate.to_string());
        m.insert("w_dice", self.w_dice.to_string());
        m.insert("w_bce", self.w_bce.to_string());
        m.insert("w_mse", self.w_mse.to_string());
        m.insert("interval", self.interval.to_string());
        m.insert("augment", self.augment.to_string());
        m.insert("shadow_probability", self.shadow_probability.to_string());
        m.insert("checkpoint_every", self.checkpoint_every.to_string());
        m.insert("memory_capacity", self.memory_capacity.to_string());
        m.insert("memory_threshold", self.memory_threshold.to_string());
        m.insert(
            "admission",
            match self.admission {
                Admission::SelfDice => "self_dice",
                Admission::Truth => "truth",
            }
            .to_string(),
        );
        m.insert("baseline_level", self.baseline_level.to_string());
        m.insert("seed", self.seed.to_string());
        m.insert("dataset", self.dataset.display().to_string());
        m.insert("out", self.out.display().to_string());
        m.insert("checkpoint", path(&self.checkpoint));
        m.insert("predictions", path(&self.predictions));
        m.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            backbone: BackboneConfig {
                in_channels: 1,
                widths: self.backbone_widths.clone(),
            },
            heads: self.heads,
            inner_width: self.inner_width,
            ffn_hidden: self.ffn_hidden,
            decoder: DecoderConfig {
                widths: self.decoder_widths.clone(),
                out_width: self.decoder_out,
                joint_kernel: self.joint_kernel,
            },
            seed: self.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            target: self.target,
            epochs: self.epochs,
            max_steps: self.max_steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            loss: LossConfig {
                w_dice: self.w_dice,
                w_bce: self.w_bce,
                w_mse: self.w_mse,
                ..LossConfig::default()
            },
            interval: self.interval,
            augment: self.augment,
            shadow_probability: self.shadow_probability,
            checkpoint_every: self.checkpoint_every,
            seed: self.seed,
        }
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            memory_capacity: self.memory_capacity,
            memory_threshold: self.memory_threshold,
            admission: self.admission,
            ..InferenceConfig::default()
        }
    }

    /// Checks every cross-field invariant the commands rely on.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.image_size.is_multiple_of(16) || self.image_size == 0 {
            return Err(bad(format!("image_size {} must be a positive multiple of 16", self.image_size)));
        }
        self.model().validate().map_err(|e| bad(e.to_string()))?;
        self.train().validate().map_err(|e| bad(e.to_string()))?;
        if self.sequences == 0 || self.frames == 0 {
            return Err(bad("sequences and frames must be positive"));
        }
        if self.memory_capacity == 0 || !(0.0..=1.0).contains(&self.memory_threshold) {
            return Err(bad("memory_capacity must be positive and memory_threshold in [0, 1]"));
        }
        if !(self.baseline_level > 0.0 && self.baseline_level < 1.0) {
            return Err(bad(format!("baseline_level {} outside (0, 1)", self.baseline_level)));
        }
        Ok(())
    }

    /// The configuration as JSON, without filesystem paths, for report
    /// echoes that must not depend on where a run happened.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
