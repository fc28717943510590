//! Experiment configuration: a single JSON document with model, training,
//! stage, fine-tune, and evaluation sections. Schema errors carry a JSON
//! pointer to the offending field.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{SynthDatasetSpec, WindowSpec};
use crate::error::{Error, Result};
use crate::mae::ModelConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelConfig,
    /// Dataset location plus optional synthesis parameters for `gen-data`.
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    pub stages: Vec<StageSection>,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub eval: EvalSection,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directory: output of `gen-data`, input of everything else.
    pub dir: String,
    pub n_images: usize,
    pub n_classes: usize,
    #[serde(default = "default_gen_seed")]
    pub gen_seed: u64,
    #[serde(default = "WindowSpec::domain1_default")]
    pub domain1: WindowSpec,
    #[serde(default = "WindowSpec::domain2_default")]
    pub domain2: WindowSpec,
}

fn default_gen_seed() -> u64 {
    0
}

impl DataSection {
    pub fn synth_spec(&self, model: &ModelConfig) -> SynthDatasetSpec {
        SynthDatasetSpec {
            n_images: self.n_images,
            height: model.image_h,
            width: model.image_w,
            n_classes: self.n_classes,
            domain1: self.domain1,
            domain2: self.domain2,
            seed: self.gen_seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr_peak: f32,
    pub warmup_epochs: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub weight_decay: f32,
    pub gamma: f32,
    pub omega: f32,
    pub mask_rate: f32,
    pub alpha: f32,
    pub beta: f32,
    /// Weight of the distillation term in the total loss.
    pub fd_weight: f32,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr_peak: 0.00015,
            warmup_epochs: 4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.05,
            gamma: 2.0,
            omega: 0.5,
            mask_rate: 0.75,
            alpha: 0.01,
            beta: 0.05,
            fd_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub name: String,
    /// Training domain within the dataset (1 or 2).
    pub domain: u32,
    pub epochs: usize,
    pub batch_size: usize,
    /// Add the feature-distillation loss, replaying from `buffer_in`.
    #[serde(default)]
    pub fd: bool,
    /// Buffer file read for replay (required when `fd` is set).
    #[serde(default)]
    pub buffer_in: Option<String>,
    /// Sample a buffer from this stage's encoder after training.
    #[serde(default)]
    pub buffer_out: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub hidden_dim: usize,
    /// Fraction of the training split held out for best-epoch selection.
    pub val_fraction: f32,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            epochs: 80,
            lr: 0.00005,
            batch_size: 32,
            hidden_dim: 32,
            val_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Fraction of images (per domain) reserved for the test split.
    pub test_fraction: f32,
    /// Restrict evaluation to one domain; mixed when absent.
    pub domain: Option<u32>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            test_fraction: 0.2,
            domain: None,
        }
    }
}

/// Parse and validate a config file. Schema violations are reported with a
/// JSON pointer derived from the failing path.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        use serde_path_to_error::Segment;
        let mut pointer = String::new();
        for segment in e.path() {
            match segment {
                Segment::Map { key } => {
                    pointer.push('/');
                    pointer.push_str(key);
                }
                Segment::Seq { index } => {
                    pointer.push('/');
                    pointer.push_str(&index.to_string());
                }
                Segment::Enum { variant } => {
                    pointer.push('/');
                    pointer.push_str(variant);
                }
                Segment::Unknown => pointer.push_str("/?"),
            }
        }
        if pointer.is_empty() {
            pointer.push('/');
        }
        Error::config(pointer, e.inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn in_unit_open(v: f32) -> bool {
    v > 0.0 && v < 1.0
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| match e {
            Error::Contract(msg) => Error::config("/model", msg),
            other => other,
        })?;
        if self.seeds.is_empty() {
            return Err(Error::config("/seeds", "need at least one seed"));
        }
        if self.stages.is_empty() {
            return Err(Error::config("/stages", "need at least one stage"));
        }
        if self.data.n_images == 0 {
            return Err(Error::config("/data/n_images", "must be positive"));
        }
        if self.data.n_classes < 2 {
            return Err(Error::config("/data/n_classes", "need at least two classes"));
        }

        let t = &self.train;
        if t.lr_peak <= 0.0 {
            return Err(Error::config("/train/lr_peak", "must be > 0"));
        }
        if !in_unit_open(t.mask_rate) {
            return Err(Error::config(
                "/train/mask_rate",
                format!("{} outside (0,1)", t.mask_rate),
            ));
        }
        if !in_unit_open(t.omega) {
            return Err(Error::config("/train/omega", format!("{} outside (0,1)", t.omega)));
        }
        if t.gamma < 0.0 {
            return Err(Error::config("/train/gamma", "must be >= 0"));
        }
        if !(in_unit_open(t.alpha) || t.alpha == 1.0) || !(in_unit_open(t.beta) || t.beta == 1.0) {
            return Err(Error::config("/train/alpha", "alpha and beta must lie in (0,1]"));
        }
        if t.beta < t.alpha {
            return Err(Error::config("/train/beta", "beta must be >= alpha"));
        }
        if t.fd_weight < 0.0 {
            return Err(Error::config("/train/fd_weight", "must be >= 0"));
        }

        for (i, stage) in self.stages.iter().enumerate() {
            let at = |field: &str| format!("/stages/{i}/{field}");
            if stage.epochs == 0 {
                return Err(Error::config(at("epochs"), "must be >= 1"));
            }
            if t.warmup_epochs >= stage.epochs {
                return Err(Error::config(
                    at("epochs"),
                    format!(
                        "warmup of {} epochs must be shorter than the stage ({})",
                        t.warmup_epochs, stage.epochs
                    ),
                ));
            }
            if stage.batch_size == 0 {
                return Err(Error::config(at("batch_size"), "must be >= 1"));
            }
            if !(1..=2).contains(&stage.domain) {
                return Err(Error::config(at("domain"), "must be 1 or 2"));
            }
            if stage.fd && stage.buffer_in.is_none() {
                return Err(Error::config(
                    at("buffer_in"),
                    "feature distillation requires a replay buffer",
                ));
            }
        }

        let f = &self.finetune;
        if f.epochs == 0 || f.batch_size == 0 || f.hidden_dim == 0 {
            return Err(Error::config("/finetune/epochs", "finetune dims must be >= 1"));
        }
        if f.lr <= 0.0 {
            return Err(Error::config("/finetune/lr", "must be > 0"));
        }
        if !in_unit_open(f.val_fraction) {
            return Err(Error::config(
                "/finetune/val_fraction",
                format!("{} outside (0,1)", f.val_fraction),
            ));
        }
        if !in_unit_open(self.eval.test_fraction) {
            return Err(Error::config(
                "/eval/test_fraction",
                format!("{} outside (0,1)", self.eval.test_fraction),
            ));
        }
        if let Some(d) = self.eval.domain {
            if !(1..=2).contains(&d) {
                return Err(Error::config("/eval/domain", "must be 1 or 2"));
            }
        }
        Ok(())
    }
}
