//! `pdt` command line: synthetic data, disentanglement, training,
//! sampling, and evaluation over 3DMM parameter sequences.

mod plots;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pdt_core::config::RunConfig;
use pdt_core::error::Error;
use pdt_core::pipeline::{self, Progress};
use pdt_core::Real;

#[derive(Parser)]
#[command(name = "pdt", about = "Parameter-space talking-head diffusion toolkit")]
struct Cli {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory holding all run artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and ground truth.
    Synth,
    /// Recover the lip/eye/global partition from edit pairs.
    Disentangle,
    /// Train the lip-sync twin encoders.
    TrainSync,
    /// Train the audio-conditioned denoiser.
    Train,
    /// Sample parameter sequences for held-out audio.
    Sample,
    /// Compute metrics over sampled sequences.
    Evaluate {
        /// Also write PNG plots next to the report.
        #[arg(long)]
        plots: bool,
    },
    /// Run every stage in order, skipping completed ones.
    Pipeline,
}

fn log_line(p: &Progress) {
    println!("{}", serde_json::to_string(p).expect("progress serializes"));
}

fn event(stage: &str, event: &str) {
    println!(
        "{}",
        serde_json::json!({"stage": stage, "event": event})
    );
}

fn load_config(cli: &Cli) -> Result<RunConfig, ExitCode> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_path(path).map_err(|e| {
            error_line("config", &e);
            ExitCode::from(2)
        })?,
        None => RunConfig::default(),
    };
    if let Ok(seed) = std::env::var("PDT_SEED") {
        cfg.seed = seed.parse().map_err(|_| {
            error_line("config", &Error::Invalid(format!("PDT_SEED is not an integer: {seed}")));
            ExitCode::from(2)
        })?;
    }
    cfg.validate().map_err(|e| {
        error_line("config", &e);
        ExitCode::from(2)
    })?;
    Ok(cfg)
}

fn error_line(stage: &str, err: &Error) {
    eprintln!(
        "{}",
        serde_json::json!({"stage": stage, "event": "error", "message": err.to_string()})
    );
}

fn exit_code_for(err: &Error) -> ExitCode {
    match err {
        Error::Invalid(_) | Error::Json(_) => ExitCode::from(2),
        Error::NonFinite(_) => ExitCode::from(4),
        Error::Shape(_) | Error::Corpus(_) | Error::Format { .. } | Error::Io { .. } => {
            ExitCode::from(3)
        }
    }
}

fn run_stage<F>(stage: &str, f: F) -> ExitCode
where
    F: FnOnce() -> pdt_core::Result<()>,
{
    event(stage, "start");
    match f() {
        Ok(()) => {
            event(stage, "done");
            ExitCode::SUCCESS
        }
        Err(e) => {
            error_line(stage, &e);
            exit_code_for(&e)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let out = cli.out.clone();

    match cli.command {
        Command::Synth => run_stage("synth", || {
            pipeline::stage_synth::<Real>(&cfg, &out)?;
            Ok(())
        }),
        Command::Disentangle => run_stage("disentangle", || {
            pipeline::stage_disentangle::<Real>(&cfg, &out)?;
            Ok(())
        }),
        Command::TrainSync => run_stage("train-sync", || {
            pipeline::stage_train_sync::<Real>(&cfg, &out)?;
            Ok(())
        }),
        Command::Train => run_stage("train", || {
            pipeline::stage_train::<Real>(&cfg, &out, &mut log_line)?;
            Ok(())
        }),
        Command::Sample => run_stage("sample", || {
            pipeline::stage_sample::<Real>(&cfg, &out)?;
            Ok(())
        }),
        Command::Evaluate { plots } => run_stage("evaluate", || {
            pipeline::stage_evaluate::<Real>(&cfg, &out)?;
            if plots {
                plots::write_plots(&cfg, &out)?;
            }
            Ok(())
        }),
        Command::Pipeline => {
            event("pipeline", "start");
            match pipeline::run_pipeline::<Real>(&cfg, &out, &mut log_line) {
                Ok(report) => {
                    println!(
                        "{}",
                        serde_json::json!({
                            "stage": "pipeline",
                            "event": "done",
                            "report": out.join("report.json"),
                            "blink_rate": report.blink_rate,
                            "sync_conf": report.sync_conf,
                            "lip_l2": report.lip_l2,
                        })
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    error_line("pipeline", &e);
                    exit_code_for(&e)
                }
            }
        }
    }
}
