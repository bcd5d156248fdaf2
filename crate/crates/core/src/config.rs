//! Flat dotted-key run configuration, human-diffable and strict: unknown
//! keys are rejected so typos never pass silently.

use std::path::Path;

use thiserror::Error;

use crate::data::{Condition, DataError, Dataset, SceneSpec, SplitSpec};
use crate::model::{ModelConfig, PretrainConfig};
use crate::prompts::{TrainConfig, WeightsMode};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: `{value}`")]
    BadValue { key: String, value: String },
    #[error("malformed line {line}: `{text}` (expected key=value)")]
    MalformedLine { line: usize, text: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Benchmark data knobs: split sizes, the downstream shift, and seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub num_classes: usize,
    pub pretrain_size: usize,
    pub pretrain_eval_size: usize,
    pub pool_size: usize,
    pub eval_size: usize,
    pub noise_source: f64,
    pub noise_downstream: f64,
    pub palette_shift: f64,
    pub condition: Condition,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_classes: 6,
            pretrain_size: 240,
            pretrain_eval_size: 64,
            pool_size: 64,
            eval_size: 128,
            noise_source: 0.02,
            noise_downstream: 0.05,
            palette_shift: 0.2,
            condition: Condition::Clean,
            seed: 77,
        }
    }
}

/// Everything one run needs, as one flat document.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            // the paper-sourced TrainConfig defaults assume full-scale
            // embeddings; the toy benchmark needs a larger step size to move
            // prompts within 600 steps
            train: TrainConfig {
                base_lr: 0.05,
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(2..=6).contains(&self.data.num_classes) {
            return Err(ConfigError::Invalid(format!(
                "data.num_classes {} outside 2..=6",
                self.data.num_classes
            )));
        }
        if self.data.num_classes > self.model.num_classes_pretrain {
            return Err(ConfigError::Invalid(
                "data.num_classes exceeds model.num_classes_pretrain".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.data.palette_shift) {
            return Err(ConfigError::Invalid("palette_shift outside [0,1]".into()));
        }
        if self.pretrain.imbalance_ratio < 1.0 {
            return Err(ConfigError::Invalid(
                "pretrain.imbalance_ratio must be >= 1".into(),
            ));
        }
        Ok(())
    }

    fn classes(&self, shift: f64) -> Vec<crate::data::ClassSpec> {
        crate::data::toy::class_specs(shift)
            .into_iter()
            .take(self.data.num_classes)
            .collect()
    }

    /// Source-domain scenes: unshifted palette, clean conditions.
    pub fn source_scene(&self) -> SceneSpec {
        SceneSpec {
            classes: self.classes(0.0),
            shapes_per_image: (2, 5),
            shape_half_extent: (5.0, 10.0),
            noise_sigma: self.data.noise_source,
            condition: Condition::Clean,
        }
    }

    /// Downstream scenes: shifted palette, heavier noise, chosen condition.
    pub fn downstream_scene(&self, condition: Condition) -> SceneSpec {
        SceneSpec {
            classes: self.classes(self.data.palette_shift),
            shapes_per_image: (2, 5),
            shape_half_extent: (5.0, 10.0),
            noise_sigma: self.data.noise_downstream,
            condition,
        }
    }

    fn seed_base(&self, slot: u64) -> u64 {
        self.data.seed.wrapping_mul(1_000_000).wrapping_add(slot * 100_000)
    }

    /// Pretraining corpus and its held-out evaluation split.
    pub fn build_pretrain(&self) -> Result<(Dataset, Dataset), ConfigError> {
        let scene = self.source_scene();
        let splits = crate::data::make_splits(
            &[
                SplitSpec {
                    name: "source-train".into(),
                    scene: scene.clone(),
                    size: self.data.pretrain_size,
                    seed_base: self.seed_base(0),
                },
                SplitSpec {
                    name: "source-eval".into(),
                    scene,
                    size: self.data.pretrain_eval_size,
                    seed_base: self.seed_base(1),
                },
            ],
            self.model.image_size,
        )?;
        let mut it = splits.into_iter();
        Ok((it.next().unwrap(), it.next().unwrap()))
    }

    /// Downstream few-shot pool and evaluation split for one condition.
    /// Conditions share seed ranges on purpose: same scene geometry, shifted
    /// appearance.
    pub fn build_downstream(&self, condition: Condition) -> Result<(Dataset, Dataset), ConfigError> {
        let scene = self.downstream_scene(condition);
        let splits = crate::data::make_splits(
            &[
                SplitSpec {
                    name: format!("downstream-{}-pool", condition.label()),
                    scene: scene.clone(),
                    size: self.data.pool_size,
                    seed_base: self.seed_base(2),
                },
                SplitSpec {
                    name: format!("downstream-{}-eval", condition.label()),
                    scene,
                    size: self.data.eval_size,
                    seed_base: self.seed_base(3),
                },
            ],
            self.model.image_size,
        )?;
        let mut it = splits.into_iter();
        Ok((it.next().unwrap(), it.next().unwrap()))
    }

    /// Canonical text form: every key, sorted, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let p = &self.pretrain;
        let t = &self.train;
        let d = &self.data;
        let weights_mode = match t.weights_mode {
            WeightsMode::Learnable => "learnable",
            WeightsMode::FixedHalf => "fixed_half",
        };
        let mut lines = vec![
            format!("data.condition={}", d.condition.label()),
            format!("data.eval_size={}", d.eval_size),
            format!("data.noise_downstream={}", d.noise_downstream),
            format!("data.noise_source={}", d.noise_source),
            format!("data.num_classes={}", d.num_classes),
            format!("data.palette_shift={}", d.palette_shift),
            format!("data.pool_size={}", d.pool_size),
            format!("data.pretrain_eval_size={}", d.pretrain_eval_size),
            format!("data.pretrain_size={}", d.pretrain_size),
            format!("data.seed={}", d.seed),
            format!("model.embed_dim={}", m.embed_dim),
            format!("model.fourier_bands={}", m.fourier_bands),
            format!("model.image_size={}", m.image_size),
            format!("model.num_classes_pretrain={}", m.num_classes_pretrain),
            format!("model.num_spatial_prompts={}", m.num_spatial_prompts),
            format!("model.patch_size={}", m.patch_size),
            format!("model.token_dim={}", m.token_dim),
            format!("model.vocab_size={}", m.vocab_size),
            format!("pretrain.base_lr={}", p.base_lr),
            format!("pretrain.batch_size={}", p.batch_size),
            format!("pretrain.imbalance_ratio={}", p.imbalance_ratio),
            format!("pretrain.power={}", p.power),
            format!("pretrain.seed={}", p.seed),
            format!("pretrain.steps={}", p.steps),
            format!("pretrain.weight_decay={}", p.weight_decay),
            format!("train.base_lr={}", t.base_lr),
            format!("train.batch_size={}", t.batch_size),
            format!("train.context_tokens={}", t.context_tokens),
            format!("train.power={}", t.power),
            format!("train.total_steps={}", t.total_steps),
            format!("train.vspl_lr_scale={}", t.vspl_lr_scale),
            format!("train.weight_decay={}", t.weight_decay),
            format!("train.weights_mode={weights_mode}"),
        ];
        lines.sort();
        lines.join("\n") + "\n"
    }

    /// Parse the flat text form; unknown keys reject the document.
    pub fn from_text(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::MalformedLine {
                line: lineno + 1,
                text: raw.to_string(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        };
        macro_rules! num {
            () => {
                value.parse().map_err(|_| bad())?
            };
        }
        match key {
            "model.image_size" => self.model.image_size = num!(),
            "model.patch_size" => self.model.patch_size = num!(),
            "model.embed_dim" => self.model.embed_dim = num!(),
            "model.num_spatial_prompts" => self.model.num_spatial_prompts = num!(),
            "model.vocab_size" => self.model.vocab_size = num!(),
            "model.token_dim" => self.model.token_dim = num!(),
            "model.num_classes_pretrain" => self.model.num_classes_pretrain = num!(),
            "model.fourier_bands" => self.model.fourier_bands = num!(),
            "pretrain.steps" => self.pretrain.steps = num!(),
            "pretrain.batch_size" => self.pretrain.batch_size = num!(),
            "pretrain.base_lr" => self.pretrain.base_lr = num!(),
            "pretrain.weight_decay" => self.pretrain.weight_decay = num!(),
            "pretrain.power" => self.pretrain.power = num!(),
            "pretrain.imbalance_ratio" => self.pretrain.imbalance_ratio = num!(),
            "pretrain.seed" => self.pretrain.seed = num!(),
            "train.total_steps" => self.train.total_steps = num!(),
            "train.batch_size" => self.train.batch_size = num!(),
            "train.base_lr" => self.train.base_lr = num!(),
            "train.weight_decay" => self.train.weight_decay = num!(),
            "train.power" => self.train.power = num!(),
            "train.context_tokens" => self.train.context_tokens = num!(),
            "train.vspl_lr_scale" => self.train.vspl_lr_scale = num!(),
            "train.weights_mode" => {
                self.train.weights_mode = match value {
                    "learnable" => WeightsMode::Learnable,
                    "fixed_half" => WeightsMode::FixedHalf,
                    _ => return Err(bad()),
                }
            }
            "data.num_classes" => self.data.num_classes = num!(),
            "data.pretrain_size" => self.data.pretrain_size = num!(),
            "data.pretrain_eval_size" => self.data.pretrain_eval_size = num!(),
            "data.pool_size" => self.data.pool_size = num!(),
            "data.eval_size" => self.data.eval_size = num!(),
            "data.noise_source" => self.data.noise_source = num!(),
            "data.noise_downstream" => self.data.noise_downstream = num!(),
            "data.palette_shift" => self.data.palette_shift = num!(),
            "data.condition" => self.data.condition = Condition::parse(value).map_err(|_| bad())?,
            "data.seed" => self.data.seed = num!(),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&text)
    }

    pub fn write_file(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_text()).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}
