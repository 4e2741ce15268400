mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use voxcascade::volcore::{Dims, Spacing, DEFAULT_PHANTOM_SPACING};

use commands::Run;

#[derive(Parser)]
#[command(name = "voxcascade", version, about = "Cascaded kidney and tumor segmentation on 3D volumes")]
struct Cli {
    /// Run configuration (JSON, see docs/config.md).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic phantom cases into data_dir.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long, value_parser = parse_dims)]
        dims: Dims,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_spacing)]
        spacing: Option<Spacing>,
    },
    /// Compute normalization statistics for one stage.
    Stats {
        #[arg(long, value_parser = parse_stage)]
        stage: u8,
    },
    /// Train one stage.
    Train {
        #[arg(long, value_parser = parse_stage)]
        stage: u8,
    },
    /// Sliding-window inference of one stage.
    Infer {
        #[arg(long, value_parser = parse_stage)]
        stage: u8,
        #[arg(long, value_delimiter = ',')]
        ckpt: Vec<PathBuf>,
    },
    /// Full two-stage prediction.
    Cascade {
        #[arg(long, value_delimiter = ',')]
        ckpt1: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        ckpt2: Vec<PathBuf>,
        #[arg(long)]
        keep_intermediates: bool,
    },
    /// Dice per case against ground truth masks.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> Result<[T; 3], String> {
    let parts: Vec<T> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad component {p:?}")))
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| format!("expected three comma-separated values, got {s:?}"))
}

fn parse_dims(s: &str) -> Result<Dims, String> {
    let d: Dims = parse_triple(s)?;
    if d.contains(&0) {
        return Err("dims must be positive".into());
    }
    Ok(d)
}

fn parse_spacing(s: &str) -> Result<Spacing, String> {
    let sp: Spacing = parse_triple(s)?;
    if !sp.iter().all(|v| v.is_finite() && *v > 0.0) {
        return Err("spacing must be positive".into());
    }
    Ok(sp)
}

fn parse_stage(s: &str) -> Result<u8, String> {
    match s {
        "1" => Ok(1),
        "2" => Ok(2),
        _ => Err(format!("stage must be 1 or 2, got {s:?}")),
    }
}

fn dispatch(cli: Cli, args: Vec<String>) -> Result<()> {
    let Some(path) = &cli.config else {
        bail!("--config is required");
    };
    let cfg = config::parse_config(path)?;
    cfg.check_paths(matches!(cli.command, Command::Synth { .. }))?;
    let (label, seed) = match &cli.command {
        Command::Synth { seed, .. } => ("synth".to_string(), seed.unwrap_or(cfg.seed)),
        Command::Stats { stage } => (format!("stats_stage{stage}"), cfg.seed),
        Command::Train { stage } => (format!("train_stage{stage}"), cfg.seed),
        Command::Infer { stage, .. } => (format!("infer_stage{stage}"), cfg.seed),
        Command::Cascade { .. } => ("cascade".to_string(), cfg.seed),
        Command::Eval { .. } => ("eval".to_string(), cfg.seed),
    };
    let mut run = Run::new(&cfg, label, args, seed);
    match &cli.command {
        Command::Synth { count, dims, spacing, .. } => {
            commands::synth(&mut run, *count, *dims, spacing.unwrap_or(DEFAULT_PHANTOM_SPACING))?
        }
        Command::Stats { stage } => commands::stats(&mut run, *stage)?,
        Command::Train { stage } => commands::train(&mut run, *stage)?,
        Command::Infer { stage, ckpt } => commands::infer(&mut run, *stage, ckpt)?,
        Command::Cascade {
            ckpt1,
            ckpt2,
            keep_intermediates,
        } => commands::cascade(&mut run, ckpt1, ckpt2, *keep_intermediates)?,
        Command::Eval { pred, gt } => commands::eval(&mut run, pred, gt)?,
    }
    run.write_manifest()?;
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    match dispatch(cli, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut parts: Vec<String> = Vec::new();
            for msg in e.chain().map(|c| c.to_string()) {
                if !parts.last().is_some_and(|p| p.ends_with(&msg)) {
                    parts.push(msg);
                }
            }
            eprintln!("error: {}", parts.join(": "));
            ExitCode::FAILURE
        }
    }
}
