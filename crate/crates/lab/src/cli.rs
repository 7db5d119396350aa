//! Command-line interface. Exit codes: 0 success, 1 validation/usage
//! error, 2 runtime failure.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use unlearn_core::judge::GenerativeState;
use unlearn_core::lru::delta_p;
use unlearn_core::synthworld::{build_corpus, make_caption, Concept, Split};

use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};
use crate::{checkpoint, corpus_store, plot, report, scenario};

#[derive(Debug, Parser)]
#[command(
    name = "unlearn-lab",
    about = "Desk-scale latent-diffusion lab with low-rank concept unlearning",
    disable_help_subcommand = true
)]
pub struct Cli {
    /// JSON experiment config; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output root (overrides the config and UNLEARN_LAB_OUT).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a corpus directory (PNG files + JSON manifest).
    GenData(GenDataArgs),
    /// Contrastively pretrain the dual encoder (cached by config hash).
    PretrainClip,
    /// Pretrain the VAE and U-Net (cached by config hash).
    PretrainDiffusion,
    /// Run low-rank concept unlearning and write the checkpoint, run log,
    /// and loss figure.
    Unlearn(UnlearnArgs),
    /// Run the negative-loss few-shot baseline.
    UnlearnBaseline(UnlearnArgs),
    /// Evaluate the pretrained model (no --seed) or an unlearned run.
    Evaluate(EvaluateArgs),
    /// Render retain/forget/average loss curves from a run-log CSV.
    PlotLosses(PlotArgs),
    /// Aggregate per-seed metric reports into mean/spread rows.
    Report,
    /// Execute the full scenario: gen-data, pretrain, unlearn, evaluate.
    RunScenario,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// pretrain | forget | retain | eval
    #[arg(long, default_value = "pretrain")]
    pub split: String,
    /// Concept slug like red_circle (required for the forget split).
    #[arg(long)]
    pub concept: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub side: Option<usize>,
    /// Target directory (defaults under the output root).
    #[arg(long)]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct UnlearnArgs {
    /// Concept slug to forget, like red_circle.
    #[arg(long)]
    pub concept: Option<String>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda_retain: Option<f64>,
    #[arg(long)]
    pub lambda_forget: Option<f64>,
    #[arg(long)]
    pub lambda_reg: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Unlearning seed whose checkpoint to evaluate; omit for the
    /// pre-unlearning model.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Run-log CSV produced by the unlearn commands.
    pub run_log: PathBuf,
    /// Output SVG path (defaults next to the log).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn effective_config(cli_config: &Option<PathBuf>, out: &Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = match cli_config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = out {
        cfg.output_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli.config, &cli.out)?;
    match cli.command {
        Command::GenData(args) => gen_data(&cfg, &args),
        Command::PretrainClip => {
            let paths = scenario::ensure_pretrained_until(&cfg, scenario::Stage::Encoder)?;
            println!("encoder checkpoint: {}", paths.encoder.display());
            Ok(())
        }
        Command::PretrainDiffusion => {
            let paths = scenario::ensure_pretrained_until(&cfg, scenario::Stage::Diffusion)?;
            println!("diffusion checkpoint: {}", paths.diffusion.display());
            Ok(())
        }
        Command::Unlearn(args) => unlearn(&cfg, &args, false),
        Command::UnlearnBaseline(args) => unlearn(&cfg, &args, true),
        Command::Evaluate(args) => evaluate_cmd(&cfg, &args),
        Command::PlotLosses(args) => plot_losses(&args),
        Command::Report => report_cmd(&cfg),
        Command::RunScenario => {
            let manifest = scenario::run_scenario(&cfg)?;
            println!(
                "scenario complete: run {} ({} artifacts verified)",
                manifest.config_hash,
                manifest.artifact_hashes.len()
            );
            Ok(())
        }
    }
}

fn gen_data(cfg: &ExperimentConfig, args: &GenDataArgs) -> Result<()> {
    let split = Split::from_name(&args.split)?;
    let concept = match &args.concept {
        Some(slug) => Some(Concept::from_slug(slug)?),
        None => None,
    };
    let n = args.n.unwrap_or(match split {
        Split::Pretrain => cfg.data.pretrain_items,
        Split::Eval | Split::Retain => cfg.data.eval_items,
        Split::Forget => cfg.data.forget_items,
    });
    let seed = args
        .seed
        .unwrap_or_else(|| cfg.stage_seed(&format!("data-{}", split.name())));
    let side = args.side.unwrap_or(cfg.data.image_side);
    let dir = args
        .dir
        .clone()
        .unwrap_or_else(|| cfg.resolved_output_dir().join("data").join(split.name()));
    let corpus = build_corpus(split, concept, n, seed, side)?;
    corpus_store::save_corpus(&corpus, &dir)?;
    println!("wrote {} items to {}", corpus.items.len(), dir.display());
    Ok(())
}

fn apply_unlearn_overrides(cfg: &mut ExperimentConfig, args: &UnlearnArgs) -> Result<()> {
    if let Some(slug) = &args.concept {
        Concept::from_slug(slug)?;
        cfg.data.forget_concept = slug.clone();
    }
    if let Some(rank) = args.rank {
        cfg.unlearn.rank = rank;
    }
    if let Some(epochs) = args.epochs {
        cfg.unlearn.epochs = epochs;
    }
    if let Some(lr) = args.lr {
        cfg.unlearn.lr = lr;
    }
    if let Some(v) = args.lambda_retain {
        cfg.unlearn.lambda_retain = v;
    }
    if let Some(v) = args.lambda_forget {
        cfg.unlearn.lambda_forget = v;
    }
    if let Some(v) = args.lambda_reg {
        cfg.unlearn.lambda_reg = v;
    }
    Ok(())
}

fn unlearn(base: &ExperimentConfig, args: &UnlearnArgs, baseline: bool) -> Result<()> {
    let mut cfg = base.clone();
    apply_unlearn_overrides(&mut cfg, args)?;
    let seed = args.seed.unwrap_or(cfg.unlearn.seeds[0]);

    let paths = scenario::ensure_pretrained(&cfg)?;
    let pipeline = scenario::load_pipeline(&paths)?;
    let forget = cfg.forget_concept()?;
    let run_root = scenario::run_dir(&cfg);
    let seed_dir = if baseline {
        run_root.join(format!("baseline_seed_{seed}"))
    } else {
        run_root.join(format!("seed_{seed}"))
    };
    std::fs::create_dir_all(&seed_dir).map_err(|e| LabError::io(&seed_dir, e))?;

    let corpus = scenario::forget_corpus(&cfg, seed)?;
    let outcome = if baseline {
        unlearn_core::lru::unlearn_negative_loss_baseline(
            &pipeline.diffusion,
            &pipeline.encoder,
            &corpus,
            &make_caption(forget),
            &cfg.unlearn_config(seed),
            &crate::StdClock,
        )?
    } else {
        unlearn_core::lru::unlearn_concept(
            &pipeline.diffusion,
            &pipeline.encoder,
            &corpus,
            &make_caption(forget),
            &scenario::retain_prompts(forget),
            &cfg.unlearn_config(seed),
            &crate::StdClock,
        )?
    };

    let freezing = unlearn_core::lru::apply_freeze_policy(
        &pipeline.diffusion,
        &pipeline.encoder,
        cfg.unlearn.trainable_blocks,
        true,
    )?;
    checkpoint::save_unlearned(
        &outcome.encoder,
        &outcome.perturbation,
        &freezing,
        checkpoint::Provenance {
            config_hash: cfg.content_hash(),
            seed,
            forget_concept: cfg.data.forget_concept.clone(),
        },
        &seed_dir.join("unlearned"),
    )?;
    report::write_run_log(&outcome.log, &seed_dir.join("run_log.csv"))?;
    plot::plot_losses(&outcome.log, &seed_dir.join("losses.svg"))?;
    println!(
        "{} run complete in {:.1}s: checkpoint and run log under {}",
        if baseline { "baseline" } else { "unlearning" },
        outcome.log.wall_seconds,
        seed_dir.display()
    );
    Ok(())
}

fn evaluate_cmd(cfg: &ExperimentConfig, args: &EvaluateArgs) -> Result<()> {
    let paths = scenario::ensure_pretrained(cfg)?;
    let pipeline = scenario::load_pipeline(&paths)?;
    let run_root = scenario::run_dir(cfg);

    let (report_path, metrics) = match args.seed {
        None => {
            let metrics = scenario::evaluate_state(cfg, &pipeline, &pipeline.encoder, None, 0.0)?;
            let dir = run_root.join("pre");
            std::fs::create_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
            (dir.join("report.json"), metrics)
        }
        Some(seed) => {
            let ckpt = run_root.join(format!("seed_{seed}/unlearned"));
            if !ckpt.exists() {
                return Err(LabError::Usage(format!(
                    "no unlearned checkpoint for seed {seed}; run `unlearn --seed {seed}` first"
                )));
            }
            let (enc, lrp, _) = checkpoint::load_unlearned(&ckpt)?;
            let dp = delta_p(&lrp);
            let log = report::read_run_log(&run_root.join(format!("seed_{seed}/run_log.csv")))?;
            let metrics =
                scenario::evaluate_state(cfg, &pipeline, &enc, Some(&dp), log.wall_seconds)?;
            (run_root.join(format!("seed_{seed}/report.json")), metrics)
        }
    };
    report::write_report_json(&metrics, &report_path)?;
    println!(
        "retain_clip {:.4}  forget_clip {:.4}  fid {:.3}  detection {:.3}  time {:.1}s",
        metrics.retain_clip,
        metrics.forget_clip,
        metrics.fid,
        metrics.detection_rate,
        metrics.unlearning_time_s
    );
    println!("report: {}", report_path.display());

    // Qualitative sample grid beside the report.
    let forget_prompt = make_caption(cfg.forget_concept()?);
    let grid_path = report_path.with_file_name("forget_grid.png");
    match args.seed {
        None => {
            let state = GenerativeState {
                diffusion: &pipeline.diffusion,
                encoder: &pipeline.encoder,
                delta: None,
            };
            scenario::save_sample_grid(
                &state,
                &forget_prompt,
                cfg.eval.sample_steps,
                cfg.stage_seed("grid"),
                4,
                2,
                &grid_path,
            )?;
        }
        Some(seed) => {
            let ckpt = run_root.join(format!("seed_{seed}/unlearned"));
            let (enc, lrp, _) = checkpoint::load_unlearned(&ckpt)?;
            let dp = delta_p(&lrp);
            let state = GenerativeState {
                diffusion: &pipeline.diffusion,
                encoder: &enc,
                delta: Some(&dp),
            };
            scenario::save_sample_grid(
                &state,
                &forget_prompt,
                cfg.eval.sample_steps,
                cfg.stage_seed("grid"),
                4,
                2,
                &grid_path,
            )?;
        }
    }
    Ok(())
}

fn plot_losses(args: &PlotArgs) -> Result<()> {
    let log = report::read_run_log(&args.run_log)?;
    let out = args
        .output
        .clone()
        .unwrap_or_else(|| args.run_log.with_extension("svg"));
    plot::plot_losses(&log, &out)?;
    println!("figure: {}", out.display());
    Ok(())
}

fn report_cmd(cfg: &ExperimentConfig) -> Result<()> {
    let run_root = scenario::run_dir(cfg);
    let mut reports = Vec::new();
    for &seed in &cfg.unlearn.seeds {
        let path = run_root.join(format!("seed_{seed}/report.json"));
        if path.exists() {
            reports.push(report::read_report_json(&path)?);
        }
    }
    if reports.is_empty() {
        return Err(LabError::Usage(format!(
            "no per-seed reports under {}; run the scenario or evaluate first",
            run_root.display()
        )));
    }
    let aggregates = report::aggregate(&reports);
    report::write_aggregate_csv(&aggregates, &run_root.join("aggregate.csv"))?;
    println!("metric,mean,spread,n_runs");
    for a in &aggregates {
        println!("{},{:.6},{:.6},{}", a.metric, a.mean, a.spread, a.n_runs);
    }
    Ok(())
}
