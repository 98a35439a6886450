//! `mammoclu` command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use mammoclu::checkpoint;
use mammoclu::config::RunConfig;
use mammoclu::data::{generate_phantoms, load_manifest, load_study};
use mammoclu::model::{param_report, Model};
use mammoclu::train::{evaluate, load_split_lenient, train};
use mammoclu::viz::visualize;

/// Reference count reported by the original publication for its full model.
const PUBLISHED_PARAMS: usize = 9_805_459;

#[derive(Parser)]
#[command(name = "mammoclu", version, about = "Multi-view context-clustering mammography classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic phantom train/test splits.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from the manifests named in the config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render overlays, cluster maps and saliency maps for one study.
    Viz {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        study: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Count trainable parameters per module.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
}

fn synth(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    for (split, test) in [("train", false), ("test", true)] {
        let pc = cfg.phantom_config(test);
        if pc.study_count == 0 {
            continue;
        }
        let m = generate_phantoms(&pc, &out.join(split))?;
        println!("{split}: {} studies -> {}", pc.study_count, m.display());
    }
    Ok(())
}

fn run_train(config: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let outcome = train(&cfg)?;
    let last = outcome.history.last().context("no epoch ran")?;
    println!(
        "{}",
        serde_json::json!({
            "epochs": outcome.history.len(),
            "best_epoch": outcome.best_epoch,
            "final_loss": last.loss.total,
            "final_test": last.test,
            "best_checkpoint": outcome.best_checkpoint,
        })
    );
    Ok(())
}

fn run_eval(ckpt: &Path, manifest: &Path, out: &Path) -> Result<()> {
    let (model, meta) = checkpoint::load(ckpt)?;
    let studies = load_split_lenient(manifest, model.arch.config.image_size)?;
    if studies.is_empty() {
        bail!("no loadable study in {}", manifest.display());
    }
    let ev = evaluate(&model, &studies, meta.config.eval.threshold, meta.config.eval.tau)?;
    ev.write(out)?;
    print!("{}", ev.report.to_json());
    Ok(())
}

fn run_viz(ckpt: &Path, manifest: &Path, study: &str, out: &Path) -> Result<()> {
    let (model, _) = checkpoint::load(ckpt)?;
    let records = load_manifest(manifest)?;
    let Some(rec) = records.iter().find(|r| r.study_id == study) else {
        let ids: Vec<&str> = records.iter().map(|r| r.study_id.as_str()).collect();
        bail!("unknown study {study:?}; available: {}", ids.join(", "));
    };
    let loaded = load_study(rec, model.arch.config.image_size)?;
    let (_, views) = visualize(&model, &loaded, out)?;
    for v in views {
        for f in v.files {
            println!("{}", f.display());
        }
    }
    Ok(())
}

fn run_params(config: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let model = Model::new(&cfg.model_config(), cfg.seed)?;
    let report = param_report(&model.params);
    info!("published full-model count for comparison: {PUBLISHED_PARAMS}");
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "total": report.total,
            "modules": report.modules,
            "components": report.components,
            "published_reference": PUBLISHED_PARAMS,
        }))?
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth { config, out } => synth(config, out),
        Command::Train { config } => run_train(config),
        Command::Eval {
            ckpt,
            manifest,
            out,
        } => run_eval(ckpt, manifest, out),
        Command::Viz {
            ckpt,
            manifest,
            study,
            out,
        } => run_viz(ckpt, manifest, study, out),
        Command::Params { config } => run_params(config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
