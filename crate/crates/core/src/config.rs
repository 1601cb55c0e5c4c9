//! Run configuration: JSON schema, dot-path overrides, validation, and the
//! canonical hash stamped into every output artifact.

use crate::baselines::DecoderKind;
use crate::synthdata::EpisodeConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid override '{0}': expected key.path=value")]
    BadOverride(String),
    #[error("override path '{0}' does not address a config field")]
    BadOverridePath(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_positions: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            layers: 6,
            width: 32,
            heads: 4,
            ffn_mult: 2,
            max_positions: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    /// 1-based encoder layer indices to fuse at, ascending.
    pub layers: Vec<usize>,
    /// Decoder width F.
    pub width: usize,
    /// One gate per frame instead of per feature.
    pub scalar_gate: bool,
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection {
            layers: vec![1, 2, 4, 6],
            width: 32,
            scalar_gate: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub lambda_mal: f64,
    pub lambda_opp: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            lambda_mal: 0.01,
            lambda_opp: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: u64,
    /// Video frames per optimizer step; whole episodes are packed greedily
    /// up to this budget (at least one per step).
    pub batch_frames: usize,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub decay: f64,
    pub decay_interval: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub eval_interval: u64,
    pub val_episodes: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 2000,
            batch_frames: 256,
            lr_encoder: 5e-5,
            lr_decoder: 1e-4,
            decay: 0.95,
            decay_interval: 300,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 7,
            eval_interval: 100,
            val_episodes: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderSection,
    pub fusion: FusionSection,
    pub decoder: DecoderKind,
    pub loss: LossSection,
    pub episode: EpisodeConfig,
    pub train: TrainSection,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder: EncoderSection::default(),
            fusion: FusionSection::default(),
            decoder: DecoderKind::Higate,
            loss: LossSection::default(),
            episode: EpisodeConfig::default(),
            train: TrainSection::default(),
            out_dir: "runs/default".into(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut value: serde_json::Value = serde_json::from_str(&text)?;
        apply_overrides(&mut value, overrides)?;
        let cfg: RunConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_value_with_overrides(
        mut value: serde_json::Value,
        overrides: &[String],
    ) -> Result<RunConfig, ConfigError> {
        apply_overrides(&mut value, overrides)?;
        let cfg: RunConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |msg: String| Err(ConfigError::Invalid(msg));
        if self.encoder.heads == 0 || self.encoder.width % self.encoder.heads != 0 {
            return invalid(format!(
                "encoder.width {} must be divisible by encoder.heads {}",
                self.encoder.width, self.encoder.heads
            ));
        }
        if self.encoder.width == 0 || self.fusion.width == 0 {
            return invalid("widths must be positive".into());
        }
        let mut prev = 0usize;
        for &l in &self.fusion.layers {
            if l == 0 || l <= prev {
                return invalid(format!(
                    "fusion.layers must be strictly increasing 1-based indices, got {:?}",
                    self.fusion.layers
                ));
            }
            if l > self.encoder.layers {
                return invalid(format!(
                    "fusion layer index {l} exceeds encoder depth {}; choose indices in 1..={}",
                    self.encoder.layers, self.encoder.layers
                ));
            }
            prev = l;
        }
        if self.decoder == DecoderKind::Crossatten {
            let heads = crate::model::CROSSATTEN_HEADS;
            if self.fusion.width % heads != 0 {
                return invalid(format!(
                    "fusion.width {} must be divisible by {heads} for the crossatten decoder",
                    self.fusion.width
                ));
            }
        }
        if self.loss.lambda_mal < 0.0 || self.loss.lambda_opp < 0.0 {
            return invalid("loss weights must be nonnegative".into());
        }
        self.episode
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let t = &self.train;
        if t.lr_encoder < 0.0 || t.lr_decoder < 0.0 {
            return invalid("learning rates must be nonnegative (zero freezes a group)".into());
        }
        if !(t.decay > 0.0 && t.decay <= 1.0) {
            return invalid(format!("decay {} must be in (0, 1]", t.decay));
        }
        if t.decay_interval == 0 || t.eval_interval == 0 {
            return invalid("intervals must be positive".into());
        }
        if t.batch_frames == 0 {
            return invalid("batch_frames must be positive".into());
        }
        if t.val_episodes == 0 {
            return invalid("val_episodes must be positive".into());
        }
        let needed = self.episode.audio_frames().max(self.episode.video_frames);
        if needed > self.encoder.max_positions {
            return invalid(format!(
                "episode needs {needed} positions but encoder.max_positions is {}",
                self.encoder.max_positions
            ));
        }
        Ok(())
    }

    /// Canonical hash of the resolved configuration: SHA-256 over the
    /// canonical JSON encoding (fixed field order).
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        hex::encode(hasher.finalize())
    }
}

/// Apply `a.b.c=json-or-string` overrides onto the raw config tree. Paths
/// must address existing fields (creating new keys would defeat
/// unknown-key rejection).
pub fn apply_overrides(
    value: &mut serde_json::Value,
    overrides: &[String],
) -> Result<(), ConfigError> {
    for item in overrides {
        let (path, raw) = item
            .split_once('=')
            .ok_or_else(|| ConfigError::BadOverride(item.clone()))?;
        let parsed: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let segments: Vec<&str> = path.split('.').collect();
        let (last, parents) = segments
            .split_last()
            .ok_or_else(|| ConfigError::BadOverride(item.clone()))?;
        let mut cursor = &mut *value;
        for seg in parents {
            let obj = cursor
                .as_object_mut()
                .ok_or_else(|| ConfigError::BadOverridePath(path.to_string()))?;
            cursor = obj
                .entry(seg.to_string())
                .or_insert_with(|| serde_json::json!({}));
        }
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| ConfigError::BadOverridePath(path.to_string()))?;
        obj.insert(last.to_string(), parsed);
    }
    Ok(())
}
