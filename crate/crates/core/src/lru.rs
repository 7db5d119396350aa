//! The unlearning engine: low-rank perturbation of the text projection
//! matrix, the four-term weighted loss, the freeze policy, and the
//! epoch/image update loop. A negative-loss few-shot baseline shares the
//! same loop with the projection terms stripped.
//!
//! Per iteration over the forget images: encode the image, draw a timestep,
//! noise the latent, encode the forget and retain prompts, predict noise
//! conditioned on the perturbed projected embedding, then descend the total
//! loss on the low-rank factors and the unfrozen encoder tail. Everything
//! else stays frozen, byte for byte.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::clock::Clock;
use crate::diffusion::DiffusionModel;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Graph, ParamStore};
use crate::rng::Rng;
use crate::synthworld::{Corpus, Split};
use crate::tensor::Tensor;
use crate::textbridge::DualEncoder;
use crate::unet::ddpm_loss;

/// Factor pair A, B with dP = A B^T of rank at most r.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankPerturbation {
    pub a: Tensor,
    pub b: Tensor,
}

impl LowRankPerturbation {
    pub fn dim(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }
}

/// I.i.d. N(0, 0.01^2) factors; starts the run with dP near zero without
/// pinning its gradient direction the way a zero factor would.
pub fn init_low_rank(d: usize, r: usize, seed: u64) -> Result<LowRankPerturbation> {
    if r < 1 || r > d {
        return Err(Error::validation(format!(
            "rank {r} must satisfy 1 <= r <= d = {d}"
        )));
    }
    let mut rng = Rng::new(seed);
    Ok(LowRankPerturbation {
        a: Tensor::randn(&mut rng, 0.01, &[d, r]),
        b: Tensor::randn(&mut rng, 0.01, &[d, r]),
    })
}

/// dP = A B^T.
pub fn delta_p(lrp: &LowRankPerturbation) -> Tensor {
    lrp.a.matmul_bt(&lrp.b)
}

/// Fixed random projection target for the forget prompt, sampled once per
/// run before the epoch loop.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgetTarget {
    pub values: Tensor,
}

/// Entries i.i.d. N(0, variance); the distribution parameter is read as a
/// variance (sigma = sqrt(variance)).
pub fn sample_forget_target(d: usize, n_f: usize, seed: u64, variance: f64) -> ForgetTarget {
    let mut rng = Rng::new(seed);
    ForgetTarget {
        values: Tensor::randn(&mut rng, libm::sqrt(variance), &[d, n_f]),
    }
}

// ── Loss terms ───────────────────────────────────────────────────────

/// Negated noise-prediction MSE: the ascent term on the forget images.
pub fn loss_img(eps_hat: &Tensor, eps: &Tensor) -> Result<f64> {
    Ok(-ddpm_loss(eps_hat, eps)?)
}

/// MSE((P + dP) f_r^T, P f_r^T): how far the perturbation moves retained
/// embeddings. Algebraically MSE(dP f_r^T, 0).
pub fn loss_retain(p: &Tensor, delta: &Tensor, f_r: &Tensor) -> Result<f64> {
    p.check_same_shape(delta, "loss_retain")?;
    let d = p.shape()[0];
    if f_r.shape().len() != 2 || f_r.shape()[1] != d {
        return Err(Error::ShapeMismatch {
            context: "loss_retain",
            expected: format!("[n_r, {d}]"),
            got: f_r.shape_string(),
        });
    }
    let f_t = f_r.transposed();
    let perturbed = p.add(delta).matmul(&f_t);
    let original = p.matmul(&f_t);
    Ok(perturbed.mse(&original))
}

/// MSE((P + dP) f_f^T, F_forget): drives forget embeddings to the random
/// target.
pub fn loss_forget(p: &Tensor, delta: &Tensor, f_f: &Tensor, target: &ForgetTarget) -> Result<f64> {
    p.check_same_shape(delta, "loss_forget")?;
    let d = p.shape()[0];
    if f_f.shape().len() != 2 || f_f.shape()[1] != d {
        return Err(Error::ShapeMismatch {
            context: "loss_forget",
            expected: format!("[n_f, {d}]"),
            got: f_f.shape_string(),
        });
    }
    let n_f = f_f.shape()[0];
    if target.values.shape() != [d, n_f] {
        return Err(Error::ShapeMismatch {
            context: "loss_forget",
            expected: format!("[{d}, {n_f}]"),
            got: target.values.shape_string(),
        });
    }
    let projected = p.add(delta).matmul(&f_f.transposed());
    Ok(projected.mse(&target.values))
}

/// Frobenius norm of the perturbation.
pub fn loss_reg(delta: &Tensor) -> f64 {
    delta.frobenius_norm()
}

/// Weighted total: l_img + l1*l_retain + l2*l_forget + l3*l_reg.
pub fn total_loss(
    l_img: f64,
    l_retain: f64,
    l_forget: f64,
    l_reg: f64,
    cfg: &UnlearnConfig,
) -> Result<f64> {
    if cfg.lambda_retain < 0.0 || cfg.lambda_forget < 0.0 || cfg.lambda_reg < 0.0 {
        return Err(Error::validation("loss weights must be nonnegative"));
    }
    Ok(l_img
        + cfg.lambda_retain * l_retain
        + cfg.lambda_forget * l_forget
        + cfg.lambda_reg * l_reg)
}

// ── Freeze policy ────────────────────────────────────────────────────

/// Disjoint, exhaustive split of every parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct FreezePartition {
    pub trainable: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
}

impl FreezePartition {
    /// True when the partition covers exactly the given names, disjointly.
    pub fn covers(&self, names: impl Iterator<Item = String>) -> bool {
        let all: BTreeSet<String> = names.collect();
        let union: BTreeSet<String> = self.trainable.union(&self.frozen).cloned().collect();
        self.trainable.is_disjoint(&self.frozen) && union == all
    }
}

/// Names of the low-rank factors inside the merged working store.
pub const LORA_A: &str = "lora.a";
pub const LORA_B: &str = "lora.b";

/// Trainable = {A, B} + last `trainable_blocks` encoder blocks + final norm;
/// frozen = VAE, U-Net, embeddings, projection matrix, image tower, and the
/// remaining blocks. `include_encoder_tail = false` restricts training to
/// the factors alone (constrained runs).
pub fn apply_freeze_policy(
    diffusion: &DiffusionModel,
    encoder: &DualEncoder,
    trainable_blocks: usize,
    include_encoder_tail: bool,
) -> Result<FreezePartition> {
    let total_blocks = encoder.cfg.blocks;
    if trainable_blocks > total_blocks {
        return Err(Error::validation(format!(
            "trainable_blocks {trainable_blocks} exceeds encoder blocks {total_blocks}"
        )));
    }
    let mut trainable = BTreeSet::new();
    trainable.insert(LORA_A.to_string());
    trainable.insert(LORA_B.to_string());
    if include_encoder_tail {
        for name in encoder.params.names() {
            if name.starts_with("text.final_norm") {
                trainable.insert(name.to_string());
                continue;
            }
            for b in (total_blocks - trainable_blocks)..total_blocks {
                if name.starts_with(&format!("text.block{b}.")) {
                    trainable.insert(name.to_string());
                }
            }
        }
    }
    let mut frozen = BTreeSet::new();
    for name in diffusion
        .params
        .names()
        .chain(encoder.params.names())
    {
        if !trainable.contains(name) {
            frozen.insert(name.to_string());
        }
    }
    Ok(FreezePartition { trainable, frozen })
}

// ── The unlearning loop ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnlearnConfig {
    pub lambda_retain: f64,
    pub lambda_forget: f64,
    pub lambda_reg: f64,
    pub rank: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// How many encoder blocks from the end stay trainable.
    pub trainable_blocks: usize,
    pub clip_norm: f64,
    /// Variance of the forget-target distribution.
    pub forget_target_variance: f64,
    /// When false only A and B train (constrained diagnostics runs).
    pub include_encoder_tail: bool,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        UnlearnConfig {
            lambda_retain: 1.0,
            lambda_forget: 1.0,
            lambda_reg: 0.01,
            rank: 8,
            epochs: 10,
            lr: 1e-2,
            seed: 0,
            trainable_blocks: 2,
            clip_norm: 1.0,
            forget_target_variance: 2.0,
            include_encoder_tail: true,
        }
    }
}

/// Per-epoch batch-averaged loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub image: f64,
    pub retain: f64,
    pub forget: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default)]
pub struct UnlearnRunLog {
    pub epochs: Vec<EpochRecord>,
    pub wall_seconds: f64,
}

/// Result of an unlearning run: the modified encoder, the factors, and the
/// run log.
#[derive(Debug, Clone)]
pub struct UnlearnOutcome {
    pub encoder: DualEncoder,
    pub perturbation: LowRankPerturbation,
    pub log: UnlearnRunLog,
}

fn validate_run_inputs(
    forget_corpus: &Corpus,
    forget_prompt: &str,
    retain_prompts: &[String],
) -> Result<()> {
    if forget_corpus.split != Split::Forget {
        return Err(Error::validation("unlearning needs a forget-split corpus"));
    }
    if forget_corpus.items.is_empty() {
        return Err(Error::validation("forget corpus is empty"));
    }
    if retain_prompts.iter().any(|p| p == forget_prompt) {
        return Err(Error::validation(
            "forget prompt must be disjoint from retain prompts",
        ));
    }
    Ok(())
}

/// Algorithm: freeze everything but {A, B} and the encoder tail, then loop
/// over epochs and forget images optimizing the weighted total loss.
pub fn unlearn_concept(
    diffusion: &DiffusionModel,
    encoder: &DualEncoder,
    forget_corpus: &Corpus,
    forget_prompt: &str,
    retain_prompts: &[String],
    cfg: &UnlearnConfig,
    clock: &dyn Clock,
) -> Result<UnlearnOutcome> {
    if cfg.epochs < 1 {
        return Err(Error::validation("epochs must be at least 1"));
    }
    run_loop(
        diffusion,
        encoder,
        forget_corpus,
        forget_prompt,
        retain_prompts,
        cfg,
        clock,
        Mode::LowRank,
    )
}

/// Few-shot negative-loss baseline: the identical loop with the total loss
/// reduced to the image ascent term; no perturbation, no projection terms.
/// Trainable set: encoder tail only.
pub fn unlearn_negative_loss_baseline(
    diffusion: &DiffusionModel,
    encoder: &DualEncoder,
    forget_corpus: &Corpus,
    forget_prompt: &str,
    cfg: &UnlearnConfig,
    clock: &dyn Clock,
) -> Result<UnlearnOutcome> {
    run_loop(
        diffusion,
        encoder,
        forget_corpus,
        forget_prompt,
        &[],
        cfg,
        clock,
        Mode::NegativeLossOnly,
    )
}

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    LowRank,
    NegativeLossOnly,
}

/// Merged working store for a run: encoder and diffusion weights plus the
/// low-rank factors under `lora.a` / `lora.b`.
pub fn build_working_store(
    diffusion: &DiffusionModel,
    encoder: &DualEncoder,
    lrp: &LowRankPerturbation,
) -> ParamStore {
    let mut work = ParamStore::new();
    work.absorb(encoder.params.clone());
    work.absorb(diffusion.params.clone());
    work.insert(LORA_A, lrp.a.clone());
    work.insert(LORA_B, lrp.b.clone());
    work
}

/// Everything one optimization step needs besides the parameters.
pub struct StepInputs<'a> {
    pub z_noisy: &'a Tensor,
    pub eps: &'a Tensor,
    pub t: usize,
    pub forget_tokens: &'a [usize],
    pub retain_tokens: &'a [Vec<usize>],
    pub target: &'a ForgetTarget,
}

/// Tape handles for the loss components of one step.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub image: crate::tape::Var,
    pub retain: Option<crate::tape::Var>,
    pub forget: Option<crate::tape::Var>,
    pub reg: Option<crate::tape::Var>,
    pub total: crate::tape::Var,
}

/// Build the full-method total-loss graph for one step over a merged
/// working store (encoder + diffusion weights + `lora.a`/`lora.b`).
/// This is the exact graph the update loop descends; the acceptance
/// gradient suite rebuilds it under parameter perturbations.
pub fn build_step_graph<'s>(
    work: &'s ParamStore,
    diffusion: &DiffusionModel,
    encoder: &DualEncoder,
    cfg: &UnlearnConfig,
    inputs: &StepInputs<'_>,
) -> (Graph<'s>, StepLosses) {
    let d = encoder.cfg.dim;
    let mut g = Graph::new(work);
    let f_f = encoder.encode_tokens_graph(&mut g, inputs.forget_tokens);
    let f_f_col = g.tape.reshape(f_f, &[d, 1]);
    let p = g.param("text.proj");

    let a = g.param(LORA_A);
    let b = g.param(LORA_B);
    let delta = g.tape.matmul_nt(a, b);
    let p_eff = g.tape.add(p, delta);
    let cond_col = g.tape.matmul(p_eff, f_f_col);

    let retain_rows: Vec<_> = inputs
        .retain_tokens
        .iter()
        .map(|toks| {
            let f = encoder.encode_tokens_graph(&mut g, toks);
            g.tape.reshape(f, &[1, d])
        })
        .collect();
    let f_r = g.tape.concat_rows(&retain_rows);
    let f_r_t = g.tape.transpose(f_r);
    let lhs = g.tape.matmul(p_eff, f_r_t);
    let rhs = g.tape.matmul(p, f_r_t);
    let l_retain = g.tape.mse(lhs, rhs);

    let target_leaf = g.leaf(inputs.target.values.clone());
    let l_forget = g.tape.mse(cond_col, target_leaf);

    let delta_sq = g.tape.mul(delta, delta);
    let frob_sq = g.tape.sum(delta_sq);
    let l_reg = g.tape.sqrt(frob_sq);

    let z_leaf = g.leaf(inputs.z_noisy.clone());
    let cond_row = g.tape.reshape(cond_col, &[1, d]);
    let eps_hat = diffusion
        .unet
        .forward_graph(&mut g, z_leaf, inputs.t, cond_row);
    let eps_leaf = g.leaf(inputs.eps.clone());
    let mse = g.tape.mse(eps_hat, eps_leaf);
    let l_img = g.tape.neg(mse);

    let r_w = g.tape.scale(l_retain, cfg.lambda_retain);
    let f_w = g.tape.scale(l_forget, cfg.lambda_forget);
    let g_w = g.tape.scale(l_reg, cfg.lambda_reg);
    let s1 = g.tape.add(l_img, r_w);
    let s2 = g.tape.add(s1, f_w);
    let total = g.tape.add(s2, g_w);

    let losses = StepLosses {
        image: l_img,
        retain: Some(l_retain),
        forget: Some(l_forget),
        reg: Some(l_reg),
        total,
    };
    (g, losses)
}

/// Baseline variant: image ascent only, no perturbation terms.
pub fn build_baseline_step_graph<'s>(
    work: &'s ParamStore,
    diffusion: &DiffusionModel,
    encoder: &DualEncoder,
    inputs: &StepInputs<'_>,
) -> (Graph<'s>, StepLosses) {
    let d = encoder.cfg.dim;
    let mut g = Graph::new(work);
    let f_f = encoder.encode_tokens_graph(&mut g, inputs.forget_tokens);
    let f_f_col = g.tape.reshape(f_f, &[d, 1]);
    let p = g.param("text.proj");
    let cond_col = g.tape.matmul(p, f_f_col);
    let z_leaf = g.leaf(inputs.z_noisy.clone());
    let cond_row = g.tape.reshape(cond_col, &[1, d]);
    let eps_hat = diffusion
        .unet
        .forward_graph(&mut g, z_leaf, inputs.t, cond_row);
    let eps_leaf = g.leaf(inputs.eps.clone());
    let mse = g.tape.mse(eps_hat, eps_leaf);
    let l_img = g.tape.neg(mse);
    let losses = StepLosses {
        image: l_img,
        retain: None,
        forget: None,
        reg: None,
        total: l_img,
    };
    (g, losses)
}

#[allow(clippy::too_many_arguments)]
fn run_loop(
    diffusion: &DiffusionModel,
    encoder: &DualEncoder,
    forget_corpus: &Corpus,
    forget_prompt: &str,
    retain_prompts: &[String],
    cfg: &UnlearnConfig,
    clock: &dyn Clock,
    mode: Mode,
) -> Result<UnlearnOutcome> {
    validate_run_inputs(forget_corpus, forget_prompt, retain_prompts)?;
    let d = encoder.cfg.dim;

    let lrp = init_low_rank(d, cfg.rank, crate::rng::derive_seed(cfg.seed, "lora-init"))?;
    let mut work = build_working_store(diffusion, encoder, &lrp);

    let partition = match mode {
        Mode::LowRank => apply_freeze_policy(
            diffusion,
            encoder,
            cfg.trainable_blocks,
            cfg.include_encoder_tail,
        )?,
        Mode::NegativeLossOnly => {
            // Same tail policy, but the factors stay frozen and unused.
            let mut p = apply_freeze_policy(diffusion, encoder, cfg.trainable_blocks, true)?;
            p.trainable.remove(LORA_A);
            p.trainable.remove(LORA_B);
            p.frozen.insert(LORA_A.to_string());
            p.frozen.insert(LORA_B.to_string());
            p
        }
    };

    let target = sample_forget_target(
        d,
        1,
        crate::rng::derive_seed(cfg.seed, "forget-target"),
        cfg.forget_target_variance,
    );

    let forget_tokens = encoder.tokenize(forget_prompt)?;
    let retain_tokens: Vec<Vec<usize>> = retain_prompts
        .iter()
        .map(|p| encoder.tokenize(p))
        .collect::<Result<_>>()?;

    // Latents of the forget images under the frozen VAE.
    let mut latents = Vec::with_capacity(forget_corpus.items.len());
    for item in &forget_corpus.items {
        latents.push(diffusion.encode_image(&item.image)?);
    }

    let timesteps = diffusion.schedule.timesteps;
    let latent_shape = [
        diffusion.unet.cfg.latent_channels,
        diffusion.unet.cfg.latent_side,
        diffusion.unet.cfg.latent_side,
    ];
    let mut step_rng = Rng::substream(cfg.seed, "unlearn-steps");
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut log = UnlearnRunLog::default();
    let started = clock.now_seconds();

    for epoch in 0..cfg.epochs {
        let mut sums = EpochRecord {
            image: 0.0,
            retain: 0.0,
            forget: 0.0,
            reg: 0.0,
            total: 0.0,
        };
        for (image_index, z0) in latents.iter().enumerate() {
            let t = step_rng.below(timesteps);
            let eps = Tensor::randn(&mut step_rng, 1.0, &latent_shape);
            let z_noisy = diffusion.schedule.add_noise(z0, t, &eps)?;

            let inputs = StepInputs {
                z_noisy: &z_noisy,
                eps: &eps,
                t,
                forget_tokens: &forget_tokens,
                retain_tokens: &retain_tokens,
                target: &target,
            };
            let (g, losses) = match mode {
                Mode::LowRank => build_step_graph(&work, diffusion, encoder, cfg, &inputs),
                Mode::NegativeLossOnly => {
                    build_baseline_step_graph(&work, diffusion, encoder, &inputs)
                }
            };

            let total_value = g.value(losses.total).item();
            if !total_value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "unlearning loss diverged at epoch {epoch}, image {image_index}"
                )));
            }
            sums.image += g.value(losses.image).item();
            sums.retain += losses.retain.map_or(0.0, |v| g.value(v).item());
            sums.forget += losses.forget.map_or(0.0, |v| g.value(v).item());
            sums.reg += losses.reg.map_or(0.0, |v| g.value(v).item());
            sums.total += total_value;

            let (grads, _) = g.backward(losses.total);
            adam.step(&mut work, &grads, &partition.trainable, Some(cfg.clip_norm));
        }
        let n = latents.len() as f64;
        log.epochs.push(EpochRecord {
            image: sums.image / n,
            retain: sums.retain / n,
            forget: sums.forget / n,
            reg: sums.reg / n,
            total: sums.total / n,
        });
    }
    log.wall_seconds = clock.now_seconds() - started;

    // Split the working store back out.
    let mut modified = encoder.clone();
    for name in encoder.params.names().map(String::from).collect::<Vec<_>>() {
        *modified.params.get_mut(&name) = work.get(&name).clone();
    }
    let perturbation = LowRankPerturbation {
        a: work.get(LORA_A).clone(),
        b: work.get(LORA_B).clone(),
    };

    Ok(UnlearnOutcome {
        encoder: modified,
        perturbation,
        log,
    })
}
