//! Run configuration: one JSON file with sections, strict about unknown
//! keys, hashed into the manifest so a run can name its exact inputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use songlab_core::model::{HeadKind, ModelConfig};
use songlab_core::prefdata::PairingConfig;
use songlab_core::seed::fnv1a_hash;
use songlab_core::task::{CorruptionSpec, Vocabulary};
use songlab_core::trainers::TrainerSettings;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output root; overridden by `--out` and the SONGLAB_OUT variable.
    pub out_root: Option<PathBuf>,
    pub task: TaskSection,
    pub model: ModelSection,
    pub pairing: PairingConfig,
    pub trainer: TrainerSettings,
    pub reward_source: RewardSourceSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_root: None,
            task: TaskSection::default(),
            model: ModelSection::default(),
            pairing: PairingConfig::default(),
            trainer: TrainerSettings::default(),
            reward_source: RewardSourceSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub corpus_prompts: usize,
    pub train_prompts: usize,
    pub val_prompts: usize,
    /// Phoneme flip rate applied by the `score` command's noise channel.
    pub noise_rate: f64,
    pub temperature: f64,
    pub max_gen_len: usize,
    pub corruption: CorruptionSpec,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            corpus_prompts: 2000,
            train_prompts: 100,
            val_prompts: 90,
            noise_rate: 0.02,
            temperature: 1.0,
            max_gen_len: 96,
            corruption: CorruptionSpec::default(),
        }
    }
}

/// Trunk shape; the vocabulary and LM head are fixed by the task.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub mlp_hidden: usize,
    pub context_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::lm_default();
        ModelSection {
            embed_dim: m.embed_dim,
            num_layers: m.num_layers,
            mlp_hidden: m.mlp_hidden,
            context_len: m.context_len,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(self) -> ModelConfig {
        ModelConfig {
            vocab_size: Vocabulary::SIZE as usize,
            embed_dim: self.embed_dim,
            num_layers: self.num_layers,
            mlp_hidden: self.mlp_hidden,
            context_len: self.context_len,
            head_kind: HeadKind::Lm,
        }
    }
}

/// Where PPO and GRPO read their terminal reward. The trained reward model
/// is the default; ground-truth PER is the debugging mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardSourceSection {
    RewardModel,
    GroundTruthPer { noise_rate: f64 },
}

impl Default for RewardSourceSection {
    fn default() -> Self {
        RewardSourceSection::RewardModel
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.task.corpus_prompts == 0 || self.task.train_prompts == 0 || self.task.val_prompts == 0
        {
            bail!("task prompt counts must be positive");
        }
        if !(self.task.temperature > 0.0) {
            bail!("task.temperature must be > 0");
        }
        if !(0.0..=1.0).contains(&self.task.noise_rate) {
            bail!("task.noise_rate must be in [0, 1]");
        }
        if let RewardSourceSection::GroundTruthPer { noise_rate } = self.reward_source {
            if !(0.0..=1.0).contains(&noise_rate) {
                bail!("reward_source.noise_rate must be in [0, 1]");
            }
        }
        self.task.corruption.validate()?;
        self.pairing.validate()?;
        self.model.to_model_config().validate()?;
        Ok(())
    }

    /// Stable digest of the effective configuration.
    pub fn hash(&self) -> u64 {
        fnv1a_hash(self.to_json().as_bytes())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_stable() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = r#"{"seed": 1, "frobnicate": true}"#;
        assert!(serde_json::from_str::<RunConfig>(bad).is_err());
        let nested = r#"{"task": {"corpus_prompts": 10, "mystery": 3}}"#;
        assert!(serde_json::from_str::<RunConfig>(nested).is_err());
    }

    #[test]
    fn partial_sections_fill_from_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 7, "task": {"val_prompts": 12}}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.task.val_prompts, 12);
        assert_eq!(cfg.task.corpus_prompts, TaskSection::default().corpus_prompts);
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn reward_source_forms() {
        let rm: RewardSourceSection = serde_json::from_str(r#"{"kind": "reward_model"}"#).unwrap();
        assert_eq!(rm, RewardSourceSection::RewardModel);
        let gt: RewardSourceSection =
            serde_json::from_str(r#"{"kind": "ground_truth_per", "noise_rate": 0.0}"#).unwrap();
        assert!(matches!(gt, RewardSourceSection::GroundTruthPer { noise_rate } if noise_rate == 0.0));
    }
}
