//! `gradleak`: runs the gradient-leakage experiment pipeline from a JSON
//! config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use gradleak::pipeline::{self, ExperimentConfig, PipelineError};

#[derive(Debug, Parser)]
#[command(
    name = "gradleak",
    version,
    about = "Federated gradient capture and feature-restoration attack pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Prepare the training and test splits.
    Dataset(Common),
    /// Train the model and write its checkpoint.
    Train(Common),
    /// Simulate client steps and write gradient packets plus ground truth.
    Capture(Common),
    /// Recover labels and features and invert them.
    Attack(Common),
    /// Score the attack against ground truth and write the report.
    Evaluate(Common),
    /// Run every stage for each (epsilon, batch size) cell of the grid.
    Sweep(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn resolve(c: &Common) -> Result<(ExperimentConfig, PathBuf), PipelineError> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = Some(o.clone());
    }
    let out = cfg.out.clone().ok_or_else(|| {
        PipelineError::Validation("no output directory: set `out` or pass --out".into())
    })?;
    if c.jobs == 0 {
        return Err(PipelineError::Validation("--jobs must be >= 1".into()));
    }
    Ok((cfg, out))
}

fn run(cmd: &Command) -> Result<(), PipelineError> {
    let (common, stage) = match cmd {
        Command::Dataset(c) => (c, "dataset"),
        Command::Train(c) => (c, "train"),
        Command::Capture(c) => (c, "capture"),
        Command::Attack(c) => (c, "attack"),
        Command::Evaluate(c) => (c, "evaluate"),
        Command::Sweep(c) => (c, "sweep"),
    };
    let (cfg, out) = resolve(common)?;
    let jobs = common.jobs;
    if stage != "sweep" && cfg.sweep.is_some() {
        log::warn!("config has a sweep section; `{stage}` ignores it");
    }
    match stage {
        "dataset" => report_manifest(&pipeline::stage_dataset(&cfg, &out)?, &out),
        "train" => report_manifest(&pipeline::stage_train(&cfg, &out)?, &out),
        "capture" => report_manifest(&pipeline::stage_capture(&cfg, &out, jobs)?, &out),
        "attack" => report_manifest(&pipeline::stage_attack(&cfg, &out, jobs)?, &out),
        "evaluate" => report_manifest(&pipeline::stage_evaluate(&cfg, &out)?.0, &out),
        _ => {
            for d in pipeline::run_sweep(&cfg, &out, jobs)? {
                println!("{}", d.display());
            }
            println!(
                "{}",
                out.join(pipeline::REPORT_DIR)
                    .join("summary.json")
                    .display()
            );
        }
    }
    Ok(())
}

fn report_manifest(m: &pipeline::Manifest, out: &Path) {
    for rel in m.outputs.keys() {
        println!("{}", out.join(rel).display());
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GRADLEAK_LOG", "info")).init();
    let cli = Cli::parse();
    match run(&cli.command).context("gradleak") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e
                .downcast_ref::<PipelineError>()
                .map_or(2, PipelineError::exit_code);
            eprintln!("error: {:#}", e);
            ExitCode::from(code as u8)
        }
    }
}
