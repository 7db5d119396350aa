//! Checkpoint format: a directory holding `params.bin` (flat little-endian
//! f32 blobs concatenated in parameter-name order) and `manifest.json`
//! (name -> shape, byte offset, per-blob SHA-256, plus model metadata).
//! The loader verifies every hash.
//!
//! Encoders additionally persist their prompt vocabulary as `vocab.txt`,
//! one word per line.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unlearn_core::diffusion::{DiffusionModel, DiffusionTrainLog, TrainMeta};
use unlearn_core::judge::{ClassifierConfig, ConceptClassifier};
use unlearn_core::lru::{FreezePartition, LowRankPerturbation};
use unlearn_core::nn::ParamStore;
use unlearn_core::schedule::make_schedule;
use unlearn_core::tensor::Tensor;
use unlearn_core::textbridge::{DualEncoder, EncoderConfig, Vocab};
use unlearn_core::unet::{Unet, UnetConfig};
use unlearn_core::vae::{Vae, VaeConfig};

use crate::error::{LabError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub kind: String,
    pub params: Vec<ParamRecord>,
    pub meta: serde_json::Value,
}

pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn tensor_to_f32_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Write a parameter store with metadata; returns the manifest.
pub fn save_params(
    store: &ParamStore,
    dir: &Path,
    kind: &str,
    meta: serde_json::Value,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let mut blob = Vec::new();
    let mut records = Vec::with_capacity(store.len());
    for (name, tensor) in store.iter() {
        let bytes = tensor_to_f32_bytes(tensor);
        records.push(ParamRecord {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            offset: blob.len() as u64,
            sha256: sha256_hex(&bytes),
        });
        blob.extend_from_slice(&bytes);
    }
    let bin_path = dir.join("params.bin");
    fs::write(&bin_path, &blob).map_err(|e| LabError::io(&bin_path, e))?;
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        params: records,
        meta,
    };
    let manifest_path = dir.join("manifest.json");
    let json =
        serde_json::to_string_pretty(&manifest).map_err(|e| LabError::json(&manifest_path, e))?;
    fs::write(&manifest_path, json).map_err(|e| LabError::io(&manifest_path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| LabError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| LabError::json(&path, e))
}

/// Read a store back, verifying every per-parameter hash and shape.
pub fn load_params(dir: &Path) -> Result<(ParamStore, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(LabError::Integrity(format!(
            "unsupported checkpoint format {}",
            manifest.format_version
        )));
    }
    let bin_path = dir.join("params.bin");
    let blob = fs::read(&bin_path).map_err(|e| LabError::io(&bin_path, e))?;
    let mut store = ParamStore::new();
    for record in &manifest.params {
        let numel: usize = record.shape.iter().product();
        let start = record.offset as usize;
        let end = start + numel * 4;
        if end > blob.len() {
            return Err(LabError::Integrity(format!(
                "parameter {} extends past the blob ({} > {})",
                record.name,
                end,
                blob.len()
            )));
        }
        let bytes = &blob[start..end];
        let digest = sha256_hex(bytes);
        if digest != record.sha256 {
            return Err(LabError::Integrity(format!(
                "hash mismatch for parameter {}",
                record.name
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        store.insert(&record.name, Tensor::new(data, &record.shape));
    }
    Ok((store, manifest))
}

/// Per-parameter hash map straight from the manifest (freeze-integrity
/// checks compare these without loading the blobs).
pub fn param_hashes(dir: &Path) -> Result<BTreeMap<String, String>> {
    Ok(read_manifest(dir)?
        .params
        .into_iter()
        .map(|r| (r.name, r.sha256))
        .collect())
}

// ── Typed wrappers ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionMeta {
    pub vae: VaeMetaConfig,
    pub unet: UnetMetaConfig,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub latent_scale: f64,
    pub seed: u64,
    pub vae_epochs: usize,
    pub unet_epochs: usize,
    pub final_vae_loss: f64,
    pub final_unet_loss: f64,
    pub vae_epoch_losses: Vec<f64>,
    pub unet_epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VaeMetaConfig {
    pub image_side: usize,
    pub latent_channels: usize,
    pub base_channels: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct UnetMetaConfig {
    pub latent_channels: usize,
    pub latent_side: usize,
    pub base_channels: usize,
    pub mid_channels: usize,
    pub time_embed_dim: usize,
    pub context_dim: usize,
    pub norm_groups: usize,
}

impl From<VaeConfig> for VaeMetaConfig {
    fn from(c: VaeConfig) -> Self {
        VaeMetaConfig {
            image_side: c.image_side,
            latent_channels: c.latent_channels,
            base_channels: c.base_channels,
        }
    }
}

impl From<VaeMetaConfig> for VaeConfig {
    fn from(c: VaeMetaConfig) -> Self {
        VaeConfig {
            image_side: c.image_side,
            latent_channels: c.latent_channels,
            base_channels: c.base_channels,
        }
    }
}

impl From<UnetConfig> for UnetMetaConfig {
    fn from(c: UnetConfig) -> Self {
        UnetMetaConfig {
            latent_channels: c.latent_channels,
            latent_side: c.latent_side,
            base_channels: c.base_channels,
            mid_channels: c.mid_channels,
            time_embed_dim: c.time_embed_dim,
            context_dim: c.context_dim,
            norm_groups: c.norm_groups,
        }
    }
}

impl From<UnetMetaConfig> for UnetConfig {
    fn from(c: UnetMetaConfig) -> Self {
        UnetConfig {
            latent_channels: c.latent_channels,
            latent_side: c.latent_side,
            base_channels: c.base_channels,
            mid_channels: c.mid_channels,
            time_embed_dim: c.time_embed_dim,
            context_dim: c.context_dim,
            norm_groups: c.norm_groups,
        }
    }
}

pub fn save_diffusion(model: &DiffusionModel, dir: &Path) -> Result<()> {
    let meta = DiffusionMeta {
        vae: model.vae.cfg.into(),
        unet: model.unet.cfg.into(),
        timesteps: model.schedule.timesteps,
        beta_start: model.schedule.betas[0],
        beta_end: *model.schedule.betas.last().unwrap(),
        latent_scale: model.latent_scale,
        seed: model.meta.seed,
        vae_epochs: model.meta.vae_epochs,
        unet_epochs: model.meta.unet_epochs,
        final_vae_loss: model.meta.final_vae_loss,
        final_unet_loss: model.meta.final_unet_loss,
        vae_epoch_losses: model.log.vae_epoch_losses.clone(),
        unet_epoch_losses: model.log.unet_epoch_losses.clone(),
    };
    let meta_value = serde_json::to_value(&meta)
        .map_err(|e| LabError::json(dir.join("manifest.json"), e))?;
    save_params(&model.params, dir, "diffusion", meta_value)?;
    Ok(())
}

pub fn load_diffusion(dir: &Path) -> Result<DiffusionModel> {
    let (params, manifest) = load_params(dir)?;
    if manifest.kind != "diffusion" {
        return Err(LabError::Integrity(format!(
            "expected a diffusion checkpoint, found '{}'",
            manifest.kind
        )));
    }
    let meta: DiffusionMeta = serde_json::from_value(manifest.meta)
        .map_err(|e| LabError::json(dir.join("manifest.json"), e))?;
    let schedule = make_schedule(meta.timesteps, meta.beta_start, meta.beta_end)?;
    Ok(DiffusionModel {
        vae: Vae::new(meta.vae.into()),
        unet: Unet::new(meta.unet.into()),
        schedule,
        params,
        latent_scale: meta.latent_scale,
        meta: TrainMeta {
            seed: meta.seed,
            vae_epochs: meta.vae_epochs,
            unet_epochs: meta.unet_epochs,
            final_vae_loss: meta.final_vae_loss,
            final_unet_loss: meta.final_unet_loss,
        },
        log: DiffusionTrainLog {
            vae_epoch_losses: meta.vae_epoch_losses,
            unet_epoch_losses: meta.unet_epoch_losses,
        },
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderMeta {
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub max_len: usize,
    pub image_base_channels: usize,
    pub image_side: usize,
    pub temperature: f64,
    /// Freezing metadata: an exhaustive, disjoint partition of names.
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
    /// Provenance for unlearned encoders.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub forget_concept: String,
}

fn encoder_meta(
    encoder: &DualEncoder,
    freezing: Option<&FreezePartition>,
    provenance: Option<Provenance>,
    extra_names: &[&str],
) -> EncoderMeta {
    let (trainable, frozen) = match freezing {
        Some(p) => (
            p.trainable.iter().cloned().collect(),
            p.frozen.iter().cloned().collect(),
        ),
        // Freshly pretrained: everything is trainable.
        None => (
            encoder
                .params
                .names()
                .map(String::from)
                .chain(extra_names.iter().map(|s| s.to_string()))
                .collect(),
            Vec::new(),
        ),
    };
    EncoderMeta {
        dim: encoder.cfg.dim,
        blocks: encoder.cfg.blocks,
        heads: encoder.cfg.heads,
        mlp_dim: encoder.cfg.mlp_dim,
        max_len: encoder.cfg.max_len,
        image_base_channels: encoder.cfg.image_base_channels,
        image_side: encoder.cfg.image_side,
        temperature: encoder.cfg.temperature,
        trainable,
        frozen,
        provenance,
    }
}

fn write_vocab(encoder: &DualEncoder, dir: &Path) -> Result<()> {
    let vocab_path = dir.join("vocab.txt");
    let mut text = String::new();
    for word in encoder.vocab.words() {
        text.push_str(word);
        text.push('\n');
    }
    fs::write(&vocab_path, text).map_err(|e| LabError::io(&vocab_path, e))
}

fn read_vocab(dir: &Path) -> Result<Vocab> {
    let vocab_path = dir.join("vocab.txt");
    let text = fs::read_to_string(&vocab_path).map_err(|e| LabError::io(&vocab_path, e))?;
    Ok(Vocab::from_words(
        text.lines().map(String::from).collect(),
    ))
}

pub fn save_encoder(
    encoder: &DualEncoder,
    dir: &Path,
    freezing: Option<&FreezePartition>,
) -> Result<()> {
    let meta = encoder_meta(encoder, freezing, None, &[]);
    let meta_value =
        serde_json::to_value(&meta).map_err(|e| LabError::json(dir.join("manifest.json"), e))?;
    save_params(&encoder.params, dir, "encoder", meta_value)?;
    write_vocab(encoder, dir)
}

fn encoder_from_parts(params: ParamStore, meta: &EncoderMeta, vocab: Vocab) -> DualEncoder {
    DualEncoder {
        cfg: EncoderConfig {
            dim: meta.dim,
            blocks: meta.blocks,
            heads: meta.heads,
            mlp_dim: meta.mlp_dim,
            max_len: meta.max_len,
            image_base_channels: meta.image_base_channels,
            image_side: meta.image_side,
            temperature: meta.temperature,
        },
        vocab,
        params,
    }
}

pub fn load_encoder(dir: &Path) -> Result<DualEncoder> {
    let (params, manifest) = load_params(dir)?;
    if manifest.kind != "encoder" {
        return Err(LabError::Integrity(format!(
            "expected an encoder checkpoint, found '{}'",
            manifest.kind
        )));
    }
    let meta: EncoderMeta = serde_json::from_value(manifest.meta)
        .map_err(|e| LabError::json(dir.join("manifest.json"), e))?;
    Ok(encoder_from_parts(params, &meta, read_vocab(dir)?))
}

/// Persist the unlearning product: modified encoder weights plus the
/// low-rank factors, with the freeze partition and provenance.
pub fn save_unlearned(
    encoder: &DualEncoder,
    perturbation: &LowRankPerturbation,
    freezing: &FreezePartition,
    provenance: Provenance,
    dir: &Path,
) -> Result<()> {
    let mut store = encoder.params.clone();
    store.insert(unlearn_core::lru::LORA_A, perturbation.a.clone());
    store.insert(unlearn_core::lru::LORA_B, perturbation.b.clone());
    let meta = encoder_meta(encoder, Some(freezing), Some(provenance), &[]);
    let meta_value =
        serde_json::to_value(&meta).map_err(|e| LabError::json(dir.join("manifest.json"), e))?;
    save_params(&store, dir, "unlearned", meta_value)?;
    write_vocab(encoder, dir)
}

pub fn load_unlearned(dir: &Path) -> Result<(DualEncoder, LowRankPerturbation, Provenance)> {
    let (store, manifest) = load_params(dir)?;
    if manifest.kind != "unlearned" {
        return Err(LabError::Integrity(format!(
            "expected an unlearned checkpoint, found '{}'",
            manifest.kind
        )));
    }
    let meta: EncoderMeta = serde_json::from_value(manifest.meta)
        .map_err(|e| LabError::json(dir.join("manifest.json"), e))?;
    let provenance = meta
        .provenance
        .clone()
        .ok_or_else(|| LabError::Integrity("unlearned checkpoint lacks provenance".into()))?;
    let a = store.get(unlearn_core::lru::LORA_A).clone();
    let b = store.get(unlearn_core::lru::LORA_B).clone();
    let mut encoder_params = ParamStore::new();
    for (name, t) in store.iter() {
        if name != unlearn_core::lru::LORA_A && name != unlearn_core::lru::LORA_B {
            encoder_params.insert(name, t.clone());
        }
    }
    let encoder = encoder_from_parts(encoder_params, &meta, read_vocab(dir)?);
    Ok((encoder, LowRankPerturbation { a, b }, provenance))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierMeta {
    pub image_side: usize,
    pub base_channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub noise_std: f64,
    pub max_shift: usize,
    pub holdout_fraction: f64,
    pub accuracy_gate: f64,
    pub accuracy: f64,
}

pub fn save_classifier(classifier: &ConceptClassifier, dir: &Path) -> Result<()> {
    let c = &classifier.cfg;
    let meta = ClassifierMeta {
        image_side: c.image_side,
        base_channels: c.base_channels,
        epochs: c.epochs,
        batch_size: c.batch_size,
        lr: c.lr,
        noise_std: c.noise_std,
        max_shift: c.max_shift,
        holdout_fraction: c.holdout_fraction,
        accuracy_gate: c.accuracy_gate,
        accuracy: classifier.accuracy,
    };
    let meta_value =
        serde_json::to_value(&meta).map_err(|e| LabError::json(dir.join("manifest.json"), e))?;
    save_params(&classifier.params, dir, "classifier", meta_value)?;
    Ok(())
}

pub fn load_classifier(dir: &Path) -> Result<ConceptClassifier> {
    let (params, manifest) = load_params(dir)?;
    if manifest.kind != "classifier" {
        return Err(LabError::Integrity(format!(
            "expected a classifier checkpoint, found '{}'",
            manifest.kind
        )));
    }
    let meta: ClassifierMeta = serde_json::from_value(manifest.meta)
        .map_err(|e| LabError::json(dir.join("manifest.json"), e))?;
    Ok(ConceptClassifier {
        cfg: ClassifierConfig {
            image_side: meta.image_side,
            base_channels: meta.base_channels,
            epochs: meta.epochs,
            batch_size: meta.batch_size,
            lr: meta.lr,
            noise_std: meta.noise_std,
            max_shift: meta.max_shift,
            holdout_fraction: meta.holdout_fraction,
            accuracy_gate: meta.accuracy_gate,
        },
        params,
        accuracy: meta.accuracy,
    })
}
