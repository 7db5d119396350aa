//! Experiment configuration: one JSON-serializable struct covering data,
//! pretraining budgets, unlearning, and evaluation, plus the content hash
//! used for checkpoint caching.
//!
//! All randomness descends from `global_seed` through named substreams
//! (`derive_seed(global_seed, stage_name)`); stage names are listed on
//! [`ExperimentConfig::stage_seed`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unlearn_core::diffusion::DiffusionTrainConfig;
use unlearn_core::judge::{ClassifierConfig, EvalConfig};
use unlearn_core::lru::UnlearnConfig;
use unlearn_core::rng::derive_seed;
use unlearn_core::synthworld::Concept;
use unlearn_core::textbridge::{ContrastiveConfig, EncoderConfig};
use unlearn_core::unet::UnetConfig;
use unlearn_core::vae::VaeConfig;

use crate::checkpoint::sha256_hex;
use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSettings {
    pub image_side: usize,
    pub pretrain_items: usize,
    pub eval_items: usize,
    /// Forget-set size (the few-shot budget).
    pub forget_items: usize,
    /// Concept slug like "red_circle".
    pub forget_concept: String,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            image_side: 32,
            pretrain_items: 1600,
            eval_items: 320,
            forget_items: 5,
            forget_concept: "red_circle".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSettings {
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub max_len: usize,
    pub image_base_channels: usize,
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        let e = EncoderConfig::default();
        let c = ContrastiveConfig::default();
        EncoderSettings {
            dim: e.dim,
            blocks: e.blocks,
            heads: e.heads,
            mlp_dim: e.mlp_dim,
            max_len: e.max_len,
            image_base_channels: e.image_base_channels,
            temperature: e.temperature,
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr: c.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionSettings {
    pub latent_channels: usize,
    pub vae_base_channels: usize,
    pub unet_base_channels: usize,
    pub unet_mid_channels: usize,
    pub time_embed_dim: usize,
    pub norm_groups: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub vae_epochs: usize,
    pub unet_epochs: usize,
    pub batch_size: usize,
    pub vae_lr: f64,
    pub unet_lr: f64,
    pub kl_weight: f64,
}

impl Default for DiffusionSettings {
    fn default() -> Self {
        let d = DiffusionTrainConfig::default();
        DiffusionSettings {
            latent_channels: d.vae.latent_channels,
            vae_base_channels: d.vae.base_channels,
            unet_base_channels: d.unet.base_channels,
            unet_mid_channels: d.unet.mid_channels,
            time_embed_dim: d.unet.time_embed_dim,
            norm_groups: d.unet.norm_groups,
            timesteps: d.timesteps,
            beta_start: d.beta_start,
            beta_end: d.beta_end,
            vae_epochs: d.vae_epochs,
            unet_epochs: d.unet_epochs,
            batch_size: d.batch_size,
            vae_lr: d.vae_lr,
            unet_lr: d.unet_lr,
            kl_weight: d.kl_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierSettings {
    pub base_channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub noise_std: f64,
    pub max_shift: usize,
    pub holdout_fraction: f64,
    pub accuracy_gate: f64,
}

impl Default for ClassifierSettings {
    fn default() -> Self {
        let c = ClassifierConfig::default();
        ClassifierSettings {
            base_channels: c.base_channels,
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr: c.lr,
            noise_std: c.noise_std,
            max_shift: c.max_shift,
            holdout_fraction: c.holdout_fraction,
            accuracy_gate: c.accuracy_gate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnlearnSettings {
    pub lambda_retain: f64,
    pub lambda_forget: f64,
    pub lambda_reg: f64,
    pub rank: usize,
    pub epochs: usize,
    pub lr: f64,
    pub trainable_blocks: usize,
    pub clip_norm: f64,
    pub forget_target_variance: f64,
    /// Seed grid for the scenario (one unlearning run per seed).
    pub seeds: Vec<u64>,
}

impl Default for UnlearnSettings {
    fn default() -> Self {
        let u = UnlearnConfig::default();
        UnlearnSettings {
            lambda_retain: u.lambda_retain,
            lambda_forget: u.lambda_forget,
            lambda_reg: u.lambda_reg,
            rank: u.rank,
            epochs: u.epochs,
            lr: u.lr,
            trainable_blocks: u.trainable_blocks,
            clip_norm: u.clip_norm,
            forget_target_variance: u.forget_target_variance,
            seeds: vec![101, 102, 103],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub n_forget_samples: usize,
    pub n_retain_samples_per_prompt: usize,
    pub sample_steps: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        let e = EvalConfig::default();
        EvalSettings {
            n_forget_samples: e.n_forget_samples,
            n_retain_samples_per_prompt: e.n_retain_samples_per_prompt,
            sample_steps: e.sample_steps,
        }
    }
}

/// The complete experiment description. `output_dir` locates artifacts and
/// is excluded from the content hash so moving an experiment does not
/// invalidate its cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub global_seed: u64,
    pub data: DataSettings,
    pub encoder: EncoderSettings,
    pub diffusion: DiffusionSettings,
    pub classifier: ClassifierSettings,
    pub unlearn: UnlearnSettings,
    pub eval: EvalSettings,
    pub output_dir: PathBuf,
}

/// Environment variable naming the output root when the config leaves
/// `output_dir` empty.
pub const OUTPUT_ENV: &str = "UNLEARN_LAB_OUT";

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| LabError::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| LabError::json(path, e))?;
        std::fs::write(path, json).map_err(|e| LabError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        Concept::from_slug(&self.data.forget_concept)?;
        if self.unlearn.seeds.is_empty() {
            return Err(LabError::Usage("unlearn.seeds must not be empty".into()));
        }
        if self.data.forget_items == 0 {
            return Err(LabError::Usage("data.forget_items must be positive".into()));
        }
        Ok(())
    }

    /// Output root: the config's directory, the environment override, or
    /// `./lab-out`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        if !self.output_dir.as_os_str().is_empty() {
            return self.output_dir.clone();
        }
        if let Ok(dir) = std::env::var(OUTPUT_ENV) {
            if !dir.is_empty() {
                return PathBuf::from(dir);
            }
        }
        PathBuf::from("lab-out")
    }

    /// Content hash over everything except the output directory; identical
    /// configs hash identically.
    pub fn content_hash(&self) -> String {
        let mut hashable = self.clone();
        hashable.output_dir = PathBuf::new();
        let json = serde_json::to_string(&hashable).expect("config serializes");
        sha256_hex(json.as_bytes())[..16].to_string()
    }

    /// Derived seed for a named stage.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.global_seed, stage)
    }

    pub fn forget_concept(&self) -> Result<Concept> {
        Ok(Concept::from_slug(&self.data.forget_concept)?)
    }

    // ── Conversions to core configs ──────────────────────────────────

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            dim: self.encoder.dim,
            blocks: self.encoder.blocks,
            heads: self.encoder.heads,
            mlp_dim: self.encoder.mlp_dim,
            max_len: self.encoder.max_len,
            image_base_channels: self.encoder.image_base_channels,
            image_side: self.data.image_side,
            temperature: self.encoder.temperature,
        }
    }

    pub fn contrastive_config(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            epochs: self.encoder.epochs,
            batch_size: self.encoder.batch_size,
            lr: self.encoder.lr,
        }
    }

    pub fn diffusion_config(&self) -> DiffusionTrainConfig {
        DiffusionTrainConfig {
            vae: VaeConfig {
                image_side: self.data.image_side,
                latent_channels: self.diffusion.latent_channels,
                base_channels: self.diffusion.vae_base_channels,
            },
            unet: UnetConfig {
                latent_channels: self.diffusion.latent_channels,
                latent_side: self.data.image_side / 4,
                base_channels: self.diffusion.unet_base_channels,
                mid_channels: self.diffusion.unet_mid_channels,
                time_embed_dim: self.diffusion.time_embed_dim,
                context_dim: self.encoder.dim,
                norm_groups: self.diffusion.norm_groups,
            },
            timesteps: self.diffusion.timesteps,
            beta_start: self.diffusion.beta_start,
            beta_end: self.diffusion.beta_end,
            vae_epochs: self.diffusion.vae_epochs,
            unet_epochs: self.diffusion.unet_epochs,
            batch_size: self.diffusion.batch_size,
            vae_lr: self.diffusion.vae_lr,
            unet_lr: self.diffusion.unet_lr,
            kl_weight: self.diffusion.kl_weight,
        }
    }

    pub fn classifier_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            image_side: self.data.image_side,
            base_channels: self.classifier.base_channels,
            epochs: self.classifier.epochs,
            batch_size: self.classifier.batch_size,
            lr: self.classifier.lr,
            noise_std: self.classifier.noise_std,
            max_shift: self.classifier.max_shift,
            holdout_fraction: self.classifier.holdout_fraction,
            accuracy_gate: self.classifier.accuracy_gate,
        }
    }

    pub fn unlearn_config(&self, seed: u64) -> UnlearnConfig {
        UnlearnConfig {
            lambda_retain: self.unlearn.lambda_retain,
            lambda_forget: self.unlearn.lambda_forget,
            lambda_reg: self.unlearn.lambda_reg,
            rank: self.unlearn.rank,
            epochs: self.unlearn.epochs,
            lr: self.unlearn.lr,
            seed,
            trainable_blocks: self.unlearn.trainable_blocks,
            clip_norm: self.unlearn.clip_norm,
            forget_target_variance: self.unlearn.forget_target_variance,
            include_encoder_tail: true,
        }
    }

    pub fn eval_config(&self, seed: u64) -> EvalConfig {
        EvalConfig {
            n_forget_samples: self.eval.n_forget_samples,
            n_retain_samples_per_prompt: self.eval.n_retain_samples_per_prompt,
            sample_steps: self.eval.sample_steps,
            seed,
        }
    }
}
