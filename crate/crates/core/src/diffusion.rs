//! Latent diffusion training and sampling.
//!
//! `train_diffusion` pretrains the VAE on reconstruction (with a small KL
//! term), fixes a global latent scale so the diffusion process sees
//! unit-variance codes, then trains the U-Net on the noise-prediction
//! objective with the dual encoder frozen. `sample` runs the ancestral
//! reverse process from pure noise.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Graph, ParamStore};
use crate::rng::Rng;
use crate::schedule::{make_schedule, NoiseSchedule};
use crate::synthworld::{Corpus, Image, Split};
use crate::tensor::Tensor;
use crate::textbridge::{DualEncoder, ProjectedEmbedding};
use crate::unet::{Unet, UnetConfig};
use crate::vae::{Vae, VaeConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionTrainConfig {
    pub vae: VaeConfig,
    pub unet: UnetConfig,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub vae_epochs: usize,
    pub unet_epochs: usize,
    pub batch_size: usize,
    pub vae_lr: f64,
    pub unet_lr: f64,
    /// Weight on the per-element KL term during VAE pretraining.
    pub kl_weight: f64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            vae: VaeConfig::default(),
            unet: UnetConfig::default(),
            timesteps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
            vae_epochs: 12,
            unet_epochs: 30,
            batch_size: 16,
            vae_lr: 2e-3,
            unet_lr: 2e-3,
            kl_weight: 0.01,
        }
    }
}

/// Training metadata persisted with the checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainMeta {
    pub seed: u64,
    pub vae_epochs: usize,
    pub unet_epochs: usize,
    pub final_vae_loss: f64,
    pub final_unet_loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct DiffusionTrainLog {
    pub vae_epoch_losses: Vec<f64>,
    pub unet_epoch_losses: Vec<f64>,
}

/// The trained latent diffusion model: VAE + U-Net weights, schedule, and
/// the latent normalization constant.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub vae: Vae,
    pub unet: Unet,
    pub schedule: NoiseSchedule,
    pub params: ParamStore,
    pub latent_scale: f64,
    pub meta: TrainMeta,
    pub log: DiffusionTrainLog,
}

impl DiffusionModel {
    /// Deterministic image -> unit-scale latent used by diffusion.
    pub fn encode_image(&self, image: &Image) -> Result<Tensor> {
        let raw = self.vae.encode_mean(&self.params, image)?;
        Ok(raw.scale(1.0 / self.latent_scale))
    }

    /// Unit-scale latent -> image.
    pub fn decode_latent(&self, z: &Tensor) -> Result<Tensor> {
        self.vae.decode(&self.params, &z.scale(self.latent_scale))
    }
}

fn check_dims(cfg: &DiffusionTrainConfig, encoder: &DualEncoder) -> Result<()> {
    if cfg.unet.context_dim != encoder.cfg.dim {
        return Err(Error::validation(format!(
            "unet context_dim {} != encoder dim {}",
            cfg.unet.context_dim, encoder.cfg.dim
        )));
    }
    if cfg.vae.image_side != encoder.cfg.image_side {
        return Err(Error::validation("vae and encoder image sides differ"));
    }
    if cfg.unet.latent_channels != cfg.vae.latent_channels
        || cfg.unet.latent_side != cfg.vae.latent_side()
    {
        return Err(Error::validation("unet latent geometry != vae latent geometry"));
    }
    Ok(())
}

/// Pretrain VAE and U-Net on a pretrain-split corpus. The dual encoder is
/// frozen throughout and supplies the conditioning embeddings.
pub fn train_diffusion(
    corpus: &Corpus,
    encoder: &DualEncoder,
    cfg: &DiffusionTrainConfig,
    seed: u64,
) -> Result<DiffusionModel> {
    if corpus.split != Split::Pretrain {
        return Err(Error::validation("train_diffusion needs a pretrain corpus"));
    }
    if corpus.items.is_empty() {
        return Err(Error::validation("empty corpus"));
    }
    check_dims(cfg, encoder)?;

    let schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)?;
    let vae = Vae::new(cfg.vae);
    let unet = Unet::new(cfg.unet);

    let mut params = ParamStore::new();
    let mut init_rng = Rng::substream(seed, "diffusion-init");
    vae.init_params(&mut params, &mut init_rng);
    unet.init_params(&mut params, &mut init_rng);

    let mut log = DiffusionTrainLog::default();

    // ── Phase 1: VAE reconstruction + KL ─────────────────────────────
    let vae_names: alloc::collections::BTreeSet<String> = params
        .names()
        .filter(|n| n.starts_with("vae."))
        .map(String::from)
        .collect();
    let mut vae_rng = Rng::substream(seed, "vae-train");
    let mut vae_adam = Adam::new(AdamConfig::with_lr(cfg.vae_lr));
    let latent_shape = cfg.vae.latent_shape();
    for epoch in 0..cfg.vae_epochs {
        let order = vae_rng.shuffled_indices(corpus.items.len());
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new(&params);
            let mut losses = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let x = g.leaf(corpus.items[idx].image.planes.clone());
                let (mean, logvar) = vae.encode_moments_graph(&mut g, x);
                let eps = Tensor::randn(&mut vae_rng, 1.0, &latent_shape);
                let eps = g.leaf(eps);
                let half_logvar = g.tape.scale(logvar, 0.5);
                let std = g.tape.exp(half_logvar);
                let noise = g.tape.mul(std, eps);
                let z = g.tape.add(mean, noise);
                let recon = vae.decode_graph(&mut g, z);
                let rec_loss = g.tape.mse(recon, x);
                // Per-element KL to the unit Gaussian:
                // 0.5 * mean(mu^2 + exp(logvar) - logvar - 1)
                let mu_sq = g.tape.mul(mean, mean);
                let var = g.tape.exp(logvar);
                let sum1 = g.tape.add(mu_sq, var);
                let sum2 = g.tape.sub(sum1, logvar);
                let kl_terms = g.tape.mean(sum2);
                let kl = g.tape.scale(kl_terms, 0.5 * cfg.kl_weight);
                let without_const = g.tape.add(rec_loss, kl);
                // Drop the -0.5*kl_weight constant so the reported loss is
                // exact, not shifted.
                let item_loss = g.tape.scale(without_const, 1.0);
                let shift = g.leaf(Tensor::scalar(-0.5 * cfg.kl_weight));
                let item_loss = g.tape.add(item_loss, shift);
                losses.push(item_loss);
            }
            let stacked = g.tape.concat_rows(&losses);
            let batch_loss = g.tape.mean(stacked);
            let value = g.value(batch_loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "vae loss diverged at epoch {epoch}"
                )));
            }
            epoch_loss += value;
            batches += 1;
            let (grads, _) = g.backward(batch_loss);
            vae_adam.step(&mut params, &grads, &vae_names, None);
        }
        log.vae_epoch_losses.push(epoch_loss / batches.max(1) as f64);
    }

    // ── Phase 2: latent scale ────────────────────────────────────────
    let mut raw_latents = Vec::with_capacity(corpus.items.len());
    for item in &corpus.items {
        raw_latents.push(vae.encode_mean(&params, &item.image)?);
    }
    let mut count = 0usize;
    let mut mean_acc = 0.0;
    for z in &raw_latents {
        for v in z.data() {
            mean_acc += v;
            count += 1;
        }
    }
    let mean = mean_acc / count as f64;
    let mut var_acc = 0.0;
    for z in &raw_latents {
        for v in z.data() {
            var_acc += (v - mean) * (v - mean);
        }
    }
    let std = libm::sqrt(var_acc / count as f64);
    let latent_scale = if std > 1e-6 { std } else { 1.0 };
    let scaled_latents: Vec<Tensor> = raw_latents
        .iter()
        .map(|z| z.scale(1.0 / latent_scale))
        .collect();

    // ── Phase 3: conditioning table (encoder frozen) ─────────────────
    let dim = encoder.cfg.dim;
    let mut cond_table: BTreeMap<&str, Tensor> = BTreeMap::new();
    for item in &corpus.items {
        if !cond_table.contains_key(item.caption.as_str()) {
            let e = encoder.embed_prompt(&item.caption, None)?;
            cond_table.insert(item.caption.as_str(), e.0.reshaped(&[1, dim]));
        }
    }

    // ── Phase 4: U-Net noise prediction ──────────────────────────────
    let unet_names: alloc::collections::BTreeSet<String> = params
        .names()
        .filter(|n| n.starts_with("unet."))
        .map(String::from)
        .collect();
    let mut unet_rng = Rng::substream(seed, "unet-train");
    let mut unet_adam = Adam::new(AdamConfig::with_lr(cfg.unet_lr));
    for epoch in 0..cfg.unet_epochs {
        let order = unet_rng.shuffled_indices(corpus.items.len());
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new(&params);
            let mut losses = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let t = unet_rng.below(cfg.timesteps);
                let eps = Tensor::randn(&mut unet_rng, 1.0, &latent_shape);
                let z_t = schedule.add_noise(&scaled_latents[idx], t, &eps)?;
                let z_var = g.leaf(z_t);
                let cond = g.leaf(cond_table[corpus.items[idx].caption.as_str()].clone());
                let eps_hat = unet.forward_graph(&mut g, z_var, t, cond);
                let eps_var = g.leaf(eps);
                losses.push(g.tape.mse(eps_hat, eps_var));
            }
            let stacked = g.tape.concat_rows(&losses);
            let batch_loss = g.tape.mean(stacked);
            let value = g.value(batch_loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "diffusion loss diverged at epoch {epoch}"
                )));
            }
            epoch_loss += value;
            batches += 1;
            let (grads, _) = g.backward(batch_loss);
            unet_adam.step(&mut params, &grads, &unet_names, None);
        }
        log.unet_epoch_losses.push(epoch_loss / batches.max(1) as f64);
    }

    let meta = TrainMeta {
        seed,
        vae_epochs: cfg.vae_epochs,
        unet_epochs: cfg.unet_epochs,
        final_vae_loss: log.vae_epoch_losses.last().copied().unwrap_or(0.0),
        final_unet_loss: log.unet_epoch_losses.last().copied().unwrap_or(0.0),
    };

    Ok(DiffusionModel {
        vae,
        unet,
        schedule,
        params,
        latent_scale,
        meta,
        log,
    })
}

/// Ancestral reverse-diffusion sampling from pure noise, decoded to an
/// image. With `steps == timesteps` this is the exact per-step reverse
/// process; fewer steps stride the schedule with the matching cumulative
/// ratios. Deterministic in (cond, steps, seed).
pub fn sample(
    model: &DiffusionModel,
    cond: &ProjectedEmbedding,
    steps: usize,
    seed: u64,
) -> Result<Image> {
    let t_max = model.schedule.timesteps;
    if steps < 1 {
        return Err(Error::validation("sampling needs at least one step"));
    }
    if steps > t_max {
        return Err(Error::validation(format!(
            "steps {steps} exceeds schedule length {t_max}"
        )));
    }
    model.unet.check_cond_shape(&cond.0)?;

    // Descending timestep trajectory, always ending at 0.
    let trajectory: Vec<usize> = if steps == 1 {
        alloc::vec![t_max - 1]
    } else {
        (0..steps)
            .map(|i| ((t_max - 1) * (steps - 1 - i) + (steps - 1) / 2) / (steps - 1))
            .collect()
    };

    let mut rng = Rng::substream(seed, "sample");
    let shape = [
        model.unet.cfg.latent_channels,
        model.unet.cfg.latent_side,
        model.unet.cfg.latent_side,
    ];
    let mut z = Tensor::randn(&mut rng, 1.0, &shape);
    let cond_row = cond.0.reshaped(&[1, model.unet.cfg.context_dim]);

    for (i, &t) in trajectory.iter().enumerate() {
        let abar_t = model.schedule.alpha_bars[t];
        let abar_prev = if i + 1 < trajectory.len() {
            model.schedule.alpha_bars[trajectory[i + 1]]
        } else {
            1.0
        };
        let alpha_eff = abar_t / abar_prev;
        let beta_eff = 1.0 - alpha_eff;

        let eps_hat = model
            .unet
            .predict(&model.params, &z, t, t_max, &cond_row)?;
        let coef = beta_eff / libm::sqrt(1.0 - abar_t);
        let inv_sqrt_alpha = 1.0 / libm::sqrt(alpha_eff);
        for (zv, ev) in z.data_mut().iter_mut().zip(eps_hat.data()) {
            *zv = (*zv - coef * ev) * inv_sqrt_alpha;
        }
        if i + 1 < trajectory.len() {
            let sigma = libm::sqrt(beta_eff);
            for zv in z.data_mut().iter_mut() {
                *zv += sigma * rng.normal();
            }
        }
        if !z.is_finite() {
            return Err(Error::NonFinite(format!(
                "sampler produced non-finite latent at step {i} (t={t})"
            )));
        }
    }

    let pixels = model.decode_latent(&z)?;
    Image::from_tensor(pixels)
}
