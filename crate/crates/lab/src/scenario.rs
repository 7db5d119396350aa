//! End-to-end scenario: gen-data -> pretrain -> unlearn -> evaluate, with
//! pretrained artifacts cached by config hash and a run manifest that
//! records and re-verifies every artifact hash.
//!
//! Every stage boundary passes through persistence: a stage saves its
//! product and the next stage loads it back, so a cached rerun is
//! bit-identical to the first run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unlearn_core::diffusion::DiffusionModel;
use unlearn_core::judge::{
    evaluate, ConceptClassifier, GenerativeState, MetricsReport,
};
use unlearn_core::lru::{
    apply_freeze_policy, delta_p, unlearn_concept, unlearn_negative_loss_baseline, UnlearnOutcome,
};
use unlearn_core::synthworld::{build_corpus, make_caption, Concept, Corpus, Image, Split};
use unlearn_core::textbridge::DualEncoder;

use crate::checkpoint::{self, sha256_hex, Provenance};
use crate::config::ExperimentConfig;
use crate::corpus_store;
use crate::error::{LabError, Result};
use crate::report;
use crate::StdClock;

/// Bump when an on-disk format or model architecture changes so stale
/// caches cannot masquerade as current artifacts.
pub const ARTIFACT_VERSION: &str = "lab-1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub config_hash: String,
    pub pretrain_hash: String,
    /// Relative path -> sha256 of every artifact the run produced or used.
    pub artifact_hashes: BTreeMap<String, String>,
    pub metric_paths: Vec<String>,
    pub finished_unix_seconds: u64,
}

/// Paths of the cached pretraining artifacts for a config.
#[derive(Debug, Clone)]
pub struct PretrainedPaths {
    pub pretrain_data: PathBuf,
    pub eval_data: PathBuf,
    pub encoder: PathBuf,
    pub diffusion: PathBuf,
    pub classifier: PathBuf,
}

/// Hash over the pretraining-relevant slice of the config, so unlearning or
/// evaluation tweaks reuse the cache.
pub fn pretrain_hash(cfg: &ExperimentConfig) -> String {
    let key = serde_json::json!({
        "artifact_version": ARTIFACT_VERSION,
        "global_seed": cfg.global_seed,
        "data": serde_json::to_value(&cfg.data).unwrap(),
        "encoder": serde_json::to_value(&cfg.encoder).unwrap(),
        "diffusion": serde_json::to_value(&cfg.diffusion).unwrap(),
        "classifier": serde_json::to_value(&cfg.classifier).unwrap(),
    });
    sha256_hex(key.to_string().as_bytes())[..16].to_string()
}

pub fn cache_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.resolved_output_dir()
        .join("cache")
        .join(pretrain_hash(cfg))
}

pub fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.resolved_output_dir()
        .join("runs")
        .join(cfg.content_hash())
}

fn stage_done(marker: &Path) -> bool {
    marker.exists()
}

/// Stage markers double as timing records: `<version>\n<elapsed seconds>`.
fn mark_stage(marker: &Path, elapsed_seconds: f64) -> Result<()> {
    fs::write(marker, format!("{ARTIFACT_VERSION}\n{elapsed_seconds}"))
        .map_err(|e| LabError::io(marker, e))
}

/// Elapsed seconds a cached stage took when it actually ran.
pub fn stage_seconds(marker: &Path) -> Result<f64> {
    let text = fs::read_to_string(marker).map_err(|e| LabError::io(marker, e))?;
    text.lines()
        .nth(1)
        .and_then(|l| l.parse().ok())
        .ok_or_else(|| LabError::Integrity(format!("bad stage marker {}", marker.display())))
}

/// Total measured pretraining seconds for a config (all cached stages).
pub fn pretrain_seconds(cfg: &ExperimentConfig) -> Result<f64> {
    let cache = cache_dir(cfg);
    let mut total = 0.0;
    for marker in [
        ".data-done",
        ".encoder-done",
        ".diffusion-done",
        ".classifier-done",
    ] {
        total += stage_seconds(&cache.join(marker))?;
    }
    Ok(total)
}

// ── Pretraining stages (cached) ──────────────────────────────────────

/// How far through the pretraining pipeline to go.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Data,
    Encoder,
    Diffusion,
    Classifier,
}

/// Generate corpora and pretrain everything, caching by pretrain hash.
/// Returns paths; callers load what they need.
pub fn ensure_pretrained(cfg: &ExperimentConfig) -> Result<PretrainedPaths> {
    ensure_pretrained_until(cfg, Stage::Classifier)
}

/// Run the cached pretraining pipeline up to and including `until`.
pub fn ensure_pretrained_until(cfg: &ExperimentConfig, until: Stage) -> Result<PretrainedPaths> {
    let cache = cache_dir(cfg);
    fs::create_dir_all(&cache).map_err(|e| LabError::io(&cache, e))?;
    let paths = PretrainedPaths {
        pretrain_data: cache.join("data/pretrain"),
        eval_data: cache.join("data/eval"),
        encoder: cache.join("encoder"),
        diffusion: cache.join("diffusion"),
        classifier: cache.join("classifier"),
    };

    // gen-data
    let marker = cache.join(".data-done");
    if !stage_done(&marker) {
        let stage_start = std::time::Instant::now();
        (|| -> Result<()> {
            let pretrain = build_corpus(
                Split::Pretrain,
                None,
                cfg.data.pretrain_items,
                cfg.stage_seed("data-pretrain"),
                cfg.data.image_side,
            )?;
            corpus_store::save_corpus(&pretrain, &paths.pretrain_data)?;
            let eval_corpus = build_corpus(
                Split::Eval,
                None,
                cfg.data.eval_items,
                cfg.stage_seed("data-eval"),
                cfg.data.image_side,
            )?;
            corpus_store::save_corpus(&eval_corpus, &paths.eval_data)?;
            mark_stage(&marker, stage_start.elapsed().as_secs_f64())
        })()
        .map_err(|e| LabError::stage("gen-data", e))?;
    }
    if until == Stage::Data {
        return Ok(paths);
    }

    // pretrain-clip
    let marker = cache.join(".encoder-done");
    if !stage_done(&marker) {
        let stage_start = std::time::Instant::now();
        (|| -> Result<()> {
            let corpus = corpus_store::load_corpus(&paths.pretrain_data)?;
            let mut encoder = DualEncoder::init(cfg.encoder_config(), cfg.stage_seed("encoder-init"));
            encoder.contrastive_pretrain(
                &corpus,
                cfg.contrastive_config(),
                cfg.stage_seed("encoder-train"),
            )?;
            checkpoint::save_encoder(&encoder, &paths.encoder, None)?;
            mark_stage(&marker, stage_start.elapsed().as_secs_f64())
        })()
        .map_err(|e| LabError::stage("pretrain-clip", e))?;
    }
    if until == Stage::Encoder {
        return Ok(paths);
    }

    // pretrain-diffusion
    let marker = cache.join(".diffusion-done");
    if !stage_done(&marker) {
        let stage_start = std::time::Instant::now();
        (|| -> Result<()> {
            let corpus = corpus_store::load_corpus(&paths.pretrain_data)?;
            let encoder = checkpoint::load_encoder(&paths.encoder)?;
            let model = unlearn_core::diffusion::train_diffusion(
                &corpus,
                &encoder,
                &cfg.diffusion_config(),
                cfg.stage_seed("diffusion-train"),
            )?;
            checkpoint::save_diffusion(&model, &paths.diffusion)?;
            mark_stage(&marker, stage_start.elapsed().as_secs_f64())
        })()
        .map_err(|e| LabError::stage("pretrain-diffusion", e))?;
    }
    if until == Stage::Diffusion {
        return Ok(paths);
    }

    // train-classifier
    let marker = cache.join(".classifier-done");
    if !stage_done(&marker) {
        let stage_start = std::time::Instant::now();
        (|| -> Result<()> {
            let corpus = corpus_store::load_corpus(&paths.pretrain_data)?;
            let classifier = unlearn_core::judge::train_concept_classifier(
                &corpus,
                &cfg.classifier_config(),
                cfg.stage_seed("classifier-train"),
            )?;
            checkpoint::save_classifier(&classifier, &paths.classifier)?;
            mark_stage(&marker, stage_start.elapsed().as_secs_f64())
        })()
        .map_err(|e| LabError::stage("train-classifier", e))?;
    }

    Ok(paths)
}

/// Forget corpus for a given unlearning seed (not cached; it is cheap and
/// seed-dependent).
pub fn forget_corpus(cfg: &ExperimentConfig, unlearn_seed: u64) -> Result<Corpus> {
    Ok(build_corpus(
        Split::Forget,
        Some(cfg.forget_concept()?),
        cfg.data.forget_items,
        unlearn_core::rng::derive_seed(unlearn_seed, "forget-data"),
        cfg.data.image_side,
    )?)
}

/// Everything evaluation needs, loaded from the cache.
pub struct LoadedPipeline {
    pub encoder: DualEncoder,
    pub diffusion: DiffusionModel,
    pub classifier: ConceptClassifier,
    pub eval_corpus: Corpus,
}

pub fn load_pipeline(paths: &PretrainedPaths) -> Result<LoadedPipeline> {
    Ok(LoadedPipeline {
        encoder: checkpoint::load_encoder(&paths.encoder)?,
        diffusion: checkpoint::load_diffusion(&paths.diffusion)?,
        classifier: checkpoint::load_classifier(&paths.classifier)?,
        eval_corpus: corpus_store::load_corpus(&paths.eval_data)?,
    })
}

pub fn retain_prompts(forget: Concept) -> Vec<String> {
    Concept::vocabulary()
        .into_iter()
        .filter(|c| *c != forget)
        .map(make_caption)
        .collect()
}

pub fn ground_truth_forget(eval_corpus: &Corpus, forget: Concept) -> Vec<Image> {
    eval_corpus
        .items
        .iter()
        .filter(|i| i.concept == forget)
        .map(|i| i.image.clone())
        .collect()
}

/// Run one evaluation against a model state.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_state(
    cfg: &ExperimentConfig,
    pipeline: &LoadedPipeline,
    encoder: &DualEncoder,
    delta: Option<&unlearn_core::tensor::Tensor>,
    unlearning_time_s: f64,
) -> Result<MetricsReport> {
    let forget = cfg.forget_concept()?;
    let state = GenerativeState {
        diffusion: &pipeline.diffusion,
        encoder,
        delta,
    };
    let gt = ground_truth_forget(&pipeline.eval_corpus, forget);
    Ok(evaluate(
        &state,
        &pipeline.encoder,
        &pipeline.classifier,
        &make_caption(forget),
        forget,
        &retain_prompts(forget),
        &gt,
        &cfg.eval_config(cfg.stage_seed("evaluate")),
        unlearning_time_s,
    )?)
}

/// Tile deterministic samples into one PNG (qualitative figure).
pub fn save_sample_grid(
    state: &GenerativeState<'_>,
    prompt: &str,
    steps: usize,
    seed: u64,
    cols: usize,
    rows: usize,
    path: &Path,
) -> Result<()> {
    let side = state.diffusion.vae.cfg.image_side;
    let mut grid = unlearn_core::tensor::Tensor::zeros(&[3, rows * side, cols * side]);
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            let img = state.sample_image(
                prompt,
                steps,
                unlearn_core::rng::derive_seed(seed, &format!("grid-{i}")),
            )?;
            for ch in 0..3 {
                for y in 0..side {
                    for x in 0..side {
                        let v = img.planes.data()[(ch * side + y) * side + x];
                        let gy = r * side + y;
                        let gx = c * side + x;
                        grid.data_mut()
                            [(ch * rows * side + gy) * cols * side + gx] = v;
                    }
                }
            }
        }
    }
    corpus_store::write_png(&Image { planes: grid }, path)
}

// ── The full scenario ────────────────────────────────────────────────

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn record_artifact(
    hashes: &mut BTreeMap<String, String>,
    root: &Path,
    path: &Path,
) -> Result<()> {
    let rel = path
        .strip_prefix(root)
        .unwrap_or(path)
        .to_string_lossy()
        .to_string();
    hashes.insert(rel, file_hash(path)?);
    Ok(())
}

/// gen-data -> pretrain (cached) -> per-seed unlearn -> evaluate ->
/// aggregate; returns the verified manifest.
pub fn run_scenario(cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let out_root = cfg.resolved_output_dir();
    let run_root = run_dir(cfg);
    fs::create_dir_all(&run_root).map_err(|e| LabError::io(&run_root, e))?;
    cfg.save(&run_root.join("config.json"))?;

    let paths = ensure_pretrained(cfg)?;
    let pipeline = load_pipeline(&paths).map_err(|e| LabError::stage("load-pipeline", e))?;
    let forget = cfg.forget_concept()?;
    let forget_prompt = make_caption(forget);

    let mut artifact_hashes = BTreeMap::new();
    for dir in [&paths.encoder, &paths.diffusion, &paths.classifier] {
        record_artifact(&mut artifact_hashes, &out_root, &dir.join("params.bin"))?;
    }

    let mut timings: BTreeMap<String, f64> = BTreeMap::new();

    // Pre-unlearning evaluation (shared by the whole seed grid).
    let pre_dir = run_root.join("pre");
    fs::create_dir_all(&pre_dir).map_err(|e| LabError::io(&pre_dir, e))?;
    let stage_start = std::time::Instant::now();
    let pre_report = (|| -> Result<MetricsReport> {
        let report = evaluate_state(cfg, &pipeline, &pipeline.encoder, None, 0.0)?;
        report::write_report_json(&report, &pre_dir.join("report.json"))?;
        let state = GenerativeState {
            diffusion: &pipeline.diffusion,
            encoder: &pipeline.encoder,
            delta: None,
        };
        save_sample_grid(
            &state,
            &forget_prompt,
            cfg.eval.sample_steps,
            cfg.stage_seed("grid"),
            4,
            2,
            &pre_dir.join("forget_grid.png"),
        )?;
        Ok(report)
    })()
    .map_err(|e| LabError::stage("evaluate-pre", e))?;
    timings.insert("evaluate_pre_s".into(), stage_start.elapsed().as_secs_f64());

    let mut metric_rows = vec![("pre".to_string(), pre_report)];
    let mut metric_paths = vec!["pre/report.json".to_string()];

    for &seed in &cfg.unlearn.seeds {
        let seed_dir = run_root.join(format!("seed_{seed}"));
        fs::create_dir_all(&seed_dir).map_err(|e| LabError::io(&seed_dir, e))?;

        // unlearn
        let outcome = (|| -> Result<UnlearnOutcome> {
            let corpus = forget_corpus(cfg, seed)?;
            let outcome = unlearn_concept(
                &pipeline.diffusion,
                &pipeline.encoder,
                &corpus,
                &forget_prompt,
                &retain_prompts(forget),
                &cfg.unlearn_config(seed),
                &StdClock,
            )?;
            let freezing = apply_freeze_policy(
                &pipeline.diffusion,
                &pipeline.encoder,
                cfg.unlearn.trainable_blocks,
                true,
            )?;
            checkpoint::save_unlearned(
                &outcome.encoder,
                &outcome.perturbation,
                &freezing,
                Provenance {
                    config_hash: cfg.content_hash(),
                    seed,
                    forget_concept: cfg.data.forget_concept.clone(),
                },
                &seed_dir.join("unlearned"),
            )?;
            report::write_run_log(&outcome.log, &seed_dir.join("run_log.csv"))?;
            crate::plot::plot_losses(&outcome.log, &seed_dir.join("losses.svg"))?;
            Ok(outcome)
        })()
        .map_err(|e| LabError::stage("unlearn", e))?;

        timings.insert(
            format!("unlearn_seed_{seed}_s"),
            outcome.log.wall_seconds,
        );

        // evaluate (always from the persisted checkpoint)
        let stage_start = std::time::Instant::now();
        let post_report = (|| -> Result<MetricsReport> {
            let (enc, lrp, _) = checkpoint::load_unlearned(&seed_dir.join("unlearned"))?;
            let dp = delta_p(&lrp);
            let report =
                evaluate_state(cfg, &pipeline, &enc, Some(&dp), outcome.log.wall_seconds)?;
            report::write_report_json(&report, &seed_dir.join("report.json"))?;
            let state = GenerativeState {
                diffusion: &pipeline.diffusion,
                encoder: &enc,
                delta: Some(&dp),
            };
            save_sample_grid(
                &state,
                &forget_prompt,
                cfg.eval.sample_steps,
                cfg.stage_seed("grid"),
                4,
                2,
                &seed_dir.join("forget_grid.png"),
            )?;
            Ok(report)
        })()
        .map_err(|e| LabError::stage("evaluate", e))?;
        timings.insert(
            format!("evaluate_seed_{seed}_s"),
            stage_start.elapsed().as_secs_f64(),
        );

        record_artifact(
            &mut artifact_hashes,
            &out_root,
            &seed_dir.join("unlearned/params.bin"),
        )?;
        metric_paths.push(format!("seed_{seed}/report.json"));
        metric_rows.push((format!("post_seed_{seed}"), post_report));
    }

    // Wall-time records live beside the run, outside the deterministic CSVs.
    let timings_path = run_root.join("timings.json");
    let timings_json =
        serde_json::to_string_pretty(&timings).map_err(|e| LabError::json(&timings_path, e))?;
    fs::write(&timings_path, timings_json).map_err(|e| LabError::io(&timings_path, e))?;

    // Deterministic metric CSV + aggregate over the seed grid.
    report::write_metrics_csv(&metric_rows, &run_root.join("metrics.csv"))?;
    let post_reports: Vec<MetricsReport> =
        metric_rows.iter().skip(1).map(|(_, r)| r.clone()).collect();
    let aggregates = report::aggregate(&post_reports);
    report::write_aggregate_csv(&aggregates, &run_root.join("aggregate.csv"))?;
    record_artifact(&mut artifact_hashes, &out_root, &run_root.join("metrics.csv"))?;
    record_artifact(&mut artifact_hashes, &out_root, &run_root.join("aggregate.csv"))?;

    let manifest = RunManifest {
        artifact_version: ARTIFACT_VERSION.to_string(),
        config_hash: cfg.content_hash(),
        pretrain_hash: pretrain_hash(cfg),
        artifact_hashes,
        metric_paths,
        finished_unix_seconds: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let manifest_path = run_root.join("manifest.json");
    let json =
        serde_json::to_string_pretty(&manifest).map_err(|e| LabError::json(&manifest_path, e))?;
    fs::write(&manifest_path, json).map_err(|e| LabError::io(&manifest_path, e))?;

    verify_manifest(&manifest, &out_root)?;
    Ok(manifest)
}

/// Recheck every artifact hash recorded in a manifest.
pub fn verify_manifest(manifest: &RunManifest, out_root: &Path) -> Result<()> {
    for (rel, expected) in &manifest.artifact_hashes {
        let path = out_root.join(rel);
        let got = file_hash(&path)?;
        if got != *expected {
            return Err(LabError::Integrity(format!(
                "artifact {rel} hash mismatch: {got} != {expected}"
            )));
        }
    }
    Ok(())
}

/// Baseline run sharing the cached pretrained artifacts (used by the
/// comparison report and the CLI).
pub fn run_baseline(
    cfg: &ExperimentConfig,
    pipeline: &LoadedPipeline,
    seed: u64,
) -> Result<UnlearnOutcome> {
    let forget = cfg.forget_concept()?;
    let corpus = forget_corpus(cfg, seed)?;
    Ok(unlearn_negative_loss_baseline(
        &pipeline.diffusion,
        &pipeline.encoder,
        &corpus,
        &make_caption(forget),
        &cfg.unlearn_config(seed),
        &StdClock,
    )?)
}
