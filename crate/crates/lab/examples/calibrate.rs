//! Cached calibration: pretraining gates + unlearning direction sweep.
//! Reuses the scenario cache, so reruns only pay for changed stages.
use std::time::Instant;
use unlearn_core::judge::{evaluate, GenerativeState};
use unlearn_core::lru::delta_p;
use unlearn_core::synthworld::make_caption;
use unlearn_lab::config::ExperimentConfig;
use unlearn_lab::scenario::{self, ensure_pretrained, load_pipeline};

fn main() {
    let mut cfg = ExperimentConfig::default();
    cfg.output_dir = "/tmp/lab-calib".into();
    // Optional lr override for sweeps: CAL_LR=0.02 CAL_EPOCHS=10 ...
    if let Ok(v) = std::env::var("CAL_LR") {
        cfg.unlearn.lr = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("CAL_EPOCHS") {
        cfg.unlearn.epochs = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("CAL_L_FORGET") {
        cfg.unlearn.lambda_forget = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("CAL_L_RETAIN") {
        cfg.unlearn.lambda_retain = v.parse().unwrap();
    }

    let t0 = Instant::now();
    let paths = ensure_pretrained(&cfg).unwrap();
    println!("[{:6.1}s] pretrained (cache: {})", t0.elapsed().as_secs_f64(), scenario::cache_dir(&cfg).display());
    let pipeline = load_pipeline(&paths).unwrap();
    println!(
        "[{:6.1}s] loaded; classifier acc {:.3}; unet loss {:.4} -> {:.4}",
        t0.elapsed().as_secs_f64(),
        pipeline.classifier.accuracy,
        pipeline.diffusion.log.unet_epoch_losses[0],
        pipeline.diffusion.log.unet_epoch_losses.last().unwrap()
    );

    let forget = cfg.forget_concept().unwrap();
    let forget_prompt = make_caption(forget);

    let pre = scenario::evaluate_state(&cfg, &pipeline, &pipeline.encoder, None, 0.0).unwrap();
    println!(
        "[{:6.1}s] PRE: forget_clip {:.4} retain_clip {:.4} fid {:.2} detection {:.3}",
        t0.elapsed().as_secs_f64(), pre.forget_clip, pre.retain_clip, pre.fid, pre.detection_rate
    );

    for &seed in &cfg.unlearn.seeds.clone() {
        let corpus = scenario::forget_corpus(&cfg, seed).unwrap();
        let tu = Instant::now();
        let outcome = unlearn_core::lru::unlearn_concept(
            &pipeline.diffusion,
            &pipeline.encoder,
            &corpus,
            &forget_prompt,
            &scenario::retain_prompts(forget),
            &cfg.unlearn_config(seed),
            &unlearn_lab::StdClock,
        )
        .unwrap();
        let dp = delta_p(&outcome.perturbation);
        let state = GenerativeState { diffusion: &pipeline.diffusion, encoder: &outcome.encoder, delta: Some(&dp) };
        let gt = scenario::ground_truth_forget(&pipeline.eval_corpus, forget);
        let post = evaluate(
            &state, &pipeline.encoder, &pipeline.classifier, &forget_prompt, forget,
            &scenario::retain_prompts(forget), &gt, &cfg.eval_config(cfg.stage_seed("evaluate")), outcome.log.wall_seconds,
        )
        .unwrap();
        println!(
            "[{:6.1}s] POST seed {seed}: forget {:.4} (drop {:+.4}) retain {:.4} (drop {:+.4}) fid {:.2} (pre {:.2}) det {:.3} unlearn {:.1}s",
            t0.elapsed().as_secs_f64(),
            post.forget_clip, pre.forget_clip - post.forget_clip,
            post.retain_clip, pre.retain_clip - post.retain_clip,
            post.fid, pre.fid, post.detection_rate, tu.elapsed().as_secs_f64()
        );
        let first = &outcome.log.epochs[0];
        let last = outcome.log.epochs.last().unwrap();
        println!(
            "           losses img {:.4}->{:.4} retain {:.6}->{:.6} forget {:.4}->{:.4} reg {:.4}->{:.4} | retain<forget every epoch: {}",
            first.image, last.image, first.retain, last.retain, first.forget, last.forget, first.reg, last.reg,
            outcome.log.epochs.iter().all(|e| e.retain < e.forget)
        );
    }
    println!("[{:6.1}s] done", t0.elapsed().as_secs_f64());
}
