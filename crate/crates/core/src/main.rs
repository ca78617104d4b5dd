//! Stage-granular pipeline CLI.
//!
//! Exit codes: 0 on success, 1 on property failures or runtime errors,
//! 2 on usage/config errors and missing upstream artifacts.

use clap::{Parser, Subcommand};
use shapfuse::pipeline::{verify::run_verify, Pipeline, PipelineConfig, Stage};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "shapfuse", version, about = "Shapley-guided pooling and Kronecker fusion pipeline")]
struct Cli {
    /// JSON pipeline configuration; defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override; every stage seed derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory override (also via SHAPFUSE_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Monte Carlo fold count override.
    #[arg(long, global = true)]
    folds: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort and every fold's split.
    Synth,
    /// Train the per-modality bag networks.
    TrainMil,
    /// Extract bag-level embeddings.
    Extract,
    /// Fit the attribution-driven pool and the baselines.
    FitPool,
    /// Build the fused trimodal features.
    Fuse,
    /// Compute per-fold metrics.
    Evaluate,
    /// Aggregate fold metrics into the report tables.
    Report,
    /// Run every stage in order.
    All {
        /// Start from this stage, assuming upstream artifacts exist.
        #[arg(long)]
        stage: Option<String>,
    },
    /// Run the invariant suite; nonzero exit on any failure.
    Verify,
}

fn build_config(cli: &Cli) -> shapfuse::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    if let Some(folds) = cli.folds {
        cfg.folds = folds;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    } else if let Ok(env_out) = std::env::var("SHAPFUSE_OUT") {
        if !env_out.is_empty() {
            cfg.out_dir = PathBuf::from(env_out);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> shapfuse::Result<ExitCode> {
    let cfg = build_config(&cli)?;
    match cli.command {
        Command::Verify => {
            let report = run_verify(&cfg)?;
            for check in &report.checks {
                let status = if check.passed { "PASS" } else { "FAIL" };
                println!("[{status}] {} — {}", check.name, check.detail);
            }
            let (passed, total) = report.counts();
            println!("{passed}/{total} checks passed");
            if report.all_passed() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(1))
            }
        }
        command => {
            let mut pipeline = Pipeline::new(cfg)?;
            match command {
                Command::Synth => pipeline.stage_synth()?,
                Command::TrainMil => pipeline.stage_train_mil()?,
                Command::Extract => pipeline.stage_extract()?,
                Command::FitPool => pipeline.stage_fit_pool()?,
                Command::Fuse => pipeline.stage_fuse()?,
                Command::Evaluate => pipeline.stage_evaluate()?,
                Command::Report => pipeline.stage_report()?,
                Command::All { stage } => {
                    let start = stage.as_deref().map(Stage::parse).transpose()?;
                    pipeline.run_all(start)?;
                    println!("pipeline complete: {}", pipeline.out.display());
                    return Ok(ExitCode::SUCCESS);
                }
                Command::Verify => unreachable!(),
            }
            pipeline.save_state()?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
