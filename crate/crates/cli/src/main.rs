//! `laof-lab`: dataset generation, stage training, evaluation, sweeps and
//! export. Logs go to stderr; stdout carries one JSON summary.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use laof_core::data::generate_dataset;
use laof_core::experiment::{export_table, pool_width, read_table, run_sweep, CellSpec, RunConfig, TABLE_FILE};
use laof_core::models::{load_model, LamModel, ModelShape, Stage};
use laof_core::training::{evaluate, run_stage};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "laof-lab", version, about = "Latent action learning with optical-flow constraints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the seed list (the dataset seed for gen-data).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker pool width; LAOF_LAB_THREADS caps it.
    #[arg(long)]
    workers: Option<usize>,
    /// Existing dataset directory to read instead of generating one.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
struct FromCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Model directory to start from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset directory.
    GenData(Common),
    /// Pre-train a latent action model.
    Pretrain(Common),
    /// Distill a latent policy from a pre-trained checkpoint.
    Distill(FromCheckpoint),
    /// Fine-tune the action decoder of a distilled checkpoint.
    Finetune(FromCheckpoint),
    /// Probe a checkpoint and roll out its composed policy.
    Eval(FromCheckpoint),
    /// Pre-train every cell of the configured grid.
    Sweep(Common),
    /// Write CSV series and a JSON summary from a sweep table.
    Export {
        /// Sweep output directory or table.json.
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure caused by the invocation rather than by the run.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<laof_core::Error>() {
            return if e.is_usage() { 1 } else { 2 };
        }
    }
    2
}

fn load_config(c: &Common, checkpoint: Option<&PathBuf>, seed_is_data_seed: bool) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            RunConfig::from_json(&text).with_context(|| format!("in config {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        if seed_is_data_seed {
            cfg.data.seed = s;
        } else {
            cfg.seeds = vec![s];
        }
    }
    if c.out.is_some() {
        cfg.out.clone_from(&c.out);
    }
    if c.workers.is_some() {
        cfg.workers = c.workers;
    }
    if c.data.is_some() {
        cfg.data.dir.clone_from(&c.data);
    }
    if let Some(ck) = checkpoint {
        cfg.checkpoint = Some(ck.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

/// The output directory, which must not be one of the run's inputs.
fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out.clone().ok_or_else(|| usage("an output directory is required (--out or \"out\")"))?;
    for input in [cfg.data.dir.as_ref(), cfg.checkpoint.as_ref()].into_iter().flatten() {
        if same_dir(&out, input) {
            return Err(usage(format!("output directory {} is also an input", out.display())));
        }
    }
    Ok(out)
}

fn single_cell(cfg: &RunConfig, what: &str) -> Result<CellSpec> {
    let cells = cfg.cells();
    match cells.as_slice() {
        [c] => Ok(*c),
        _ => Err(usage(format!("{what} runs a single cell, the config describes {}; use sweep", cells.len()))),
    }
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn gen_data(c: &Common) -> Result<Value> {
    let cfg = load_config(c, None, true)?;
    if cfg.data.dir.is_some() {
        return Err(usage("gen-data writes a new dataset; data.dir must be unset"));
    }
    let out = out_dir(&cfg)?;
    if out.join("manifest.json").exists() {
        return Err(usage(format!("{} already holds a dataset", out.display())));
    }
    let mut spec = cfg.data.spec(&cfg.env, Stage::Pretrain);
    spec.ratios = cfg.action_ratios.iter().copied().filter(|&r| r > 0.0).collect();
    spec.ratio_seeds = cfg.seeds.clone();
    let manifest = generate_dataset(&spec, &out)?;
    cfg.write_snapshot(Stage::Pretrain, &out)?;
    Ok(json!({
        "command": "gen-data",
        "out": out,
        "transitions": manifest.counts.transitions,
        "episodes": manifest.counts.episodes,
        "train_episodes": manifest.splits.train.len(),
        "test_episodes": manifest.splits.test.len(),
    }))
}

fn pretrain(c: &Common) -> Result<Value> {
    let cfg = load_config(c, None, false)?;
    let out = out_dir(&cfg)?;
    let cell = single_cell(&cfg, "pretrain")?;
    let stage = cfg.stage_config(Stage::Pretrain, &cell);
    cfg.write_snapshot(Stage::Pretrain, &out)?;
    let features = cfg.features(Stage::Pretrain)?;
    log::info!("pre-training {} on {} transitions", cell.variant, features.len());
    let res = run_stage(&stage, &features, None, Some(&out))?;
    let summary = json!({
        "command": "pretrain",
        "out": out,
        "variant": cell.variant,
        "seed": cell.seed,
        "action_ratio": cell.action_ratio,
        "lambda": res.log.lambda,
        "metric": res.log.final_metric(),
        "steps": res.log.steps.len(),
        "wall_clock_s": res.log.wall_clock_s,
    });
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Loads the checkpoint and pins the config to its variant and encoder.
fn with_checkpoint(cfg: &mut RunConfig) -> Result<(LamModel, Vec<Stage>)> {
    let dir = cfg.checkpoint.clone().ok_or_else(|| usage("a checkpoint is required (--checkpoint or \"checkpoint\")"))?;
    let (model, stages) = load_model(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    if ModelShape::for_env(&cfg.env) != model.shape {
        return Err(usage(format!("checkpoint {} was trained for a different environment", dir.display())));
    }
    cfg.variants = vec![model.variant];
    cfg.stage.model = Some(model.config.clone());
    if cfg.stage.latent_mode.is_none() {
        cfg.stage.latent_mode = Some(model.latent_mode);
    }
    Ok((model, stages))
}

fn continue_training(a: &FromCheckpoint, stage: Stage) -> Result<Value> {
    let mut cfg = load_config(&a.common, a.checkpoint.as_ref(), false)?;
    let out = out_dir(&cfg)?;
    let (model, stages) = with_checkpoint(&mut cfg)?;
    let cell = single_cell(&cfg, if stage == Stage::Distill { "distill" } else { "finetune" })?;
    let sc = cfg.stage_config(stage, &cell);
    sc.validate()?;
    if stage == Stage::Finetune && sc.action_ratio == 0.0 {
        return Err(usage("fine-tuning needs an action ratio > 0"));
    }
    cfg.write_snapshot(stage, &out)?;
    let features = cfg.features(stage)?;
    log::info!("{stage:?} of {} on {} transitions", cell.variant, features.len());
    let res = run_stage(&sc, &features, Some((model, stages)), Some(&out))?;
    let last = res.log.epochs.last();
    let summary = json!({
        "command": if stage == Stage::Distill { "distill" } else { "finetune" },
        "out": out,
        "variant": cell.variant,
        "seed": cell.seed,
        "action_ratio": cell.action_ratio,
        "stages": res.stages,
        "metric": res.log.final_metric(),
        "eval_loss": last.and_then(|e| e.eval_loss),
        "steps": res.log.steps.len(),
        "wall_clock_s": res.log.wall_clock_s,
    });
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn eval(a: &FromCheckpoint) -> Result<Value> {
    let mut cfg = load_config(&a.common, a.checkpoint.as_ref(), false)?;
    let out = out_dir(&cfg)?;
    let (model, stages) = with_checkpoint(&mut cfg)?;
    let cell = single_cell(&cfg, "eval")?;
    let last = *stages.last().ok_or_else(|| usage("checkpoint has no training stage"))?;
    cfg.write_snapshot(last, &out)?;
    let features = cfg.features(last)?;
    let probe = evaluate(&cfg.stage_config(Stage::Pretrain, &cell), &model, &features, 0)?.metric;
    let (composed, success) = if stages.contains(&Stage::Finetune) {
        let m = evaluate(&cfg.stage_config(Stage::Finetune, &cell), &model, &features, 0)?.metric;
        let s = if cfg.env.goal_enabled {
            Some(cfg.rollouts.clone().unwrap_or_default().success(&model, &cfg.env)?)
        } else {
            None
        };
        (m, s)
    } else {
        (None, None)
    };
    let summary = json!({
        "command": "eval",
        "out": out,
        "variant": model.variant,
        "stages": stages,
        "probe": probe,
        "composed_policy": composed,
        "rollout_success": success,
    });
    write_json(&out.join("eval.json"), &summary)?;
    Ok(summary)
}

fn sweep(c: &Common) -> Result<Value> {
    let cfg = load_config(c, None, false)?;
    let out = out_dir(&cfg)?;
    cfg.write_snapshot(Stage::Pretrain, &out)?;
    let features = cfg.features(Stage::Pretrain)?;
    let width = pool_width(cfg.workers);
    let table = run_sweep(&cfg, &features, Some(&out), width)?;
    let summary = export_table(&table, &out)?;
    Ok(json!({
        "command": "sweep",
        "out": out,
        "rows": table.len(),
        "workers": width,
        "cells": summary.cells,
    }))
}

fn export(from: &Path, out: &Path) -> Result<Value> {
    let path = if from.is_dir() { from.join(TABLE_FILE) } else { from.to_path_buf() };
    if !path.exists() {
        return Err(usage(format!("no sweep table at {}", path.display())));
    }
    if same_dir(from, out) || path.parent().is_some_and(|p| same_dir(p, out)) {
        return Err(usage("export writes into a separate directory"));
    }
    let table = read_table(&path)?;
    let summary = export_table(&table, out)?;
    Ok(json!({
        "command": "export",
        "out": out,
        "rows": table.len(),
        "files": [TABLE_FILE, "table.csv", "summary.json", "ratio_series.csv", "lambda_series.csv"],
        "cells": summary.cells,
    }))
}

fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::GenData(c) => gen_data(&c),
        Command::Pretrain(c) => pretrain(&c),
        Command::Distill(a) => continue_training(&a, Stage::Distill),
        Command::Finetune(a) => continue_training(&a, Stage::Finetune),
        Command::Eval(a) => eval(&a),
        Command::Sweep(c) => sweep(&c),
        Command::Export { from, out } => export(&from, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{}", e.render());
                    ExitCode::from(1)
                }
            };
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
