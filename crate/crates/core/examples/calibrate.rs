//! Full-scale calibration run: pretraining gates + unlearning direction.
use std::time::Instant;
use unlearn_core::clock::Clock;
use unlearn_core::diffusion::{sample, train_diffusion, DiffusionTrainConfig};
use unlearn_core::judge::*;
use unlearn_core::lru::*;
use unlearn_core::synthworld::*;
use unlearn_core::textbridge::*;

struct StdClock;
impl Clock for StdClock {
    fn now_seconds(&self) -> f64 {
        use std::time::{SystemTime, UNIX_EPOCH};
        SystemTime::now().duration_since(UNIX_EPOCH).unwrap().as_secs_f64()
    }
}

fn main() {
    let seed = 42u64;
    let t0 = Instant::now();
    let corpus = build_corpus(Split::Pretrain, None, 1600, seed ^ 1, 32).unwrap();
    let eval_corpus = build_corpus(Split::Eval, None, 320, seed ^ 2, 32).unwrap();
    println!("[{:6.1}s] corpora built", t0.elapsed().as_secs_f64());

    // ── Dual encoder ──
    let mut encoder = DualEncoder::init(EncoderConfig::default(), seed);
    let clog = encoder
        .contrastive_pretrain(&corpus, ContrastiveConfig { epochs: 30, batch_size: 32, lr: 1e-3 }, seed)
        .unwrap();
    let (matched, mismatched) = encoder.pair_similarity(&eval_corpus).unwrap();
    println!(
        "[{:6.1}s] contrastive: loss {:.4} -> {:.4} (ratio {:.3}); margin {:.3} (matched {:.3} mismatched {:.3})",
        t0.elapsed().as_secs_f64(),
        clog.epoch_losses[0],
        clog.epoch_losses.last().unwrap(),
        clog.epoch_losses.last().unwrap() / clog.epoch_losses[0],
        matched - mismatched, matched, mismatched
    );

    // ── Diffusion ──
    let dcfg = DiffusionTrainConfig::default();
    let model = train_diffusion(&corpus, &encoder, &dcfg, seed).unwrap();
    println!(
        "[{:6.1}s] vae: loss {:.5} -> {:.5}; unet: {:.4} -> {:.4} (ratio {:.3}); latent_scale {:.3}",
        t0.elapsed().as_secs_f64(),
        model.log.vae_epoch_losses[0], model.log.vae_epoch_losses.last().unwrap(),
        model.log.unet_epoch_losses[0], model.log.unet_epoch_losses.last().unwrap(),
        model.log.unet_epoch_losses.last().unwrap() / model.log.unet_epoch_losses[0],
        model.latent_scale
    );

    // VAE reconstruction gate on eval corpus.
    let mut recon = 0.0;
    for item in &eval_corpus.items {
        let z = model.vae.encode_mean(&model.params, &item.image).unwrap();
        let x = model.vae.decode(&model.params, &z).unwrap();
        recon += x.mse(&item.image.planes);
    }
    recon /= eval_corpus.items.len() as f64;
    println!("[{:6.1}s] vae recon mse/pixel on eval: {:.5} (gate 0.02)", t0.elapsed().as_secs_f64(), recon);

    // ── Classifier ──
    let classifier = train_concept_classifier(&corpus, &ClassifierConfig::default(), seed).unwrap();
    println!("[{:6.1}s] classifier holdout acc {:.3}", t0.elapsed().as_secs_f64(), classifier.accuracy);

    // ── Pre-unlearning evaluation ──
    let forget = Concept::new(Shape::Circle, Color::Red);
    let forget_prompt = make_caption(forget);
    let retain_prompts: Vec<String> = Concept::vocabulary().into_iter()
        .filter(|c| *c != forget).map(make_caption).collect();
    let gt_forget: Vec<Image> = eval_corpus.items.iter()
        .filter(|i| i.concept == forget).map(|i| i.image.clone()).collect();
    println!("ground-truth forget images: {}", gt_forget.len());

    let state = GenerativeState { diffusion: &model, encoder: &encoder, delta: None };
    let ecfg = EvalConfig { n_forget_samples: 24, n_retain_samples_per_prompt: 3, sample_steps: 100, seed };
    let pre = evaluate(&state, &encoder, &classifier, &forget_prompt, forget, &retain_prompts, &gt_forget, &ecfg, 0.0).unwrap();
    println!(
        "[{:6.1}s] PRE: forget_clip {:.4} retain_clip {:.4} fid {:.2} detection {:.3}",
        t0.elapsed().as_secs_f64(), pre.forget_clip, pre.retain_clip, pre.fid, pre.detection_rate
    );

    // Also sanity: per-prompt samples match their own concept better than another.
    let mut own = 0.0;
    let mut cross = 0.0;
    for i in 0..8 {
        let img = state.sample_image(&forget_prompt, 100, 1000 + i).unwrap();
        let e = encoder.encode_image(&img).unwrap();
        own += cosine_similarity(&e, &encoder.embed_prompt(&forget_prompt, None).unwrap().0).unwrap();
        cross += cosine_similarity(&e, &encoder.embed_prompt("an image of a blue square", None).unwrap().0).unwrap();
    }
    println!("red-circle samples: own-prompt cos {:.3} vs blue-square cos {:.3}", own / 8.0, cross / 8.0);

    // ── Unlearning (3 seeds) ──
    for useed in [7u64, 8, 9] {
        let forget_corpus = build_corpus(Split::Forget, Some(forget), 5, useed ^ 0xF0, 32).unwrap();
        let ucfg = UnlearnConfig { seed: useed, ..Default::default() };
        let tu = Instant::now();
        let outcome = unlearn_concept(&model, &encoder, &forget_corpus, &forget_prompt, &retain_prompts, &ucfg, &StdClock).unwrap();
        let dp = delta_p(&outcome.perturbation);
        let post_state = GenerativeState { diffusion: &model, encoder: &outcome.encoder, delta: Some(&dp) };
        let post = evaluate(&post_state, &encoder, &classifier, &forget_prompt, forget, &retain_prompts, &gt_forget, &ecfg, outcome.log.wall_seconds).unwrap();
        println!(
            "[{:6.1}s] POST seed {useed}: forget_clip {:.4} (drop {:.4}) retain_clip {:.4} (drop {:.4}) fid {:.2} detection {:.3} unlearn_time {:.1}s",
            t0.elapsed().as_secs_f64(),
            post.forget_clip, pre.forget_clip - post.forget_clip,
            post.retain_clip, pre.retain_clip - post.retain_clip,
            post.fid, post.detection_rate, tu.elapsed().as_secs_f64()
        );
        let first = &outcome.log.epochs[0];
        let last = outcome.log.epochs.last().unwrap();
        println!(
            "         losses: img {:.4}->{:.4} retain {:.6}->{:.6} forget {:.4}->{:.4} reg {:.4}->{:.4}",
            first.image, last.image, first.retain, last.retain, first.forget, last.forget, first.reg, last.reg
        );
    }
    println!("[{:6.1}s] done", t0.elapsed().as_secs_f64());
}
