//! Command-line front end for the outlier lab.
//!
//! One command is one process: `pretrain` trains a model from a run
//! config, `eval` scores a checkpoint (full-precision vs. quantized,
//! outlier report, length sweep), `sweep` chains pretrain+eval over a
//! list of configs into one combined CSV, `export-attn` dumps attention
//! heatmap data, and `gen-corpus` materializes the built-in synthetic
//! corpus.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric divergence,
//! 4 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use outlier_lab::config::RunConfig;
use outlier_lab::data::synth_corpus;
use outlier_lab::runner;
use outlier_lab::{LabError, Result};

#[derive(Parser)]
#[command(name = "outlier-lab", version, about = "Desk-scale attention-outlier experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model as the run config describes.
    Pretrain {
        /// Run config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory (wins over the config's `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's top-level seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint: fp-vs-quantized report, outliers, length sweep.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint produced by `pretrain`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain + eval each config and combine the headline numbers.
    Sweep {
        /// Run configs, one per sweep cell.
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump per-layer/head attention matrices for one validation sequence.
    ExportAttn {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which validation sequence to visualize.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the built-in synthetic corpus to a file.
    GenCorpus {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Approximate size of the generated text.
        #[arg(long, default_value_t = 5_000_000)]
        bytes: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Pretrain { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let outcome = runner::run_pretrain(&cfg, out.as_deref())?;
            println!("checkpoint: {}", outcome.checkpoint.display());
            println!("metrics:    {}", outcome.metrics.display());
            println!(
                "loss: {:.4} -> {:.4} over {} steps",
                outcome.first_loss, outcome.final_loss, outcome.steps
            );
        }
        Command::Eval { config, checkpoint, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let outcome = runner::run_eval(&cfg, &checkpoint, out.as_deref())?;
            println!("report: {}", outcome.report_path.display());
            if let Some(path) = &outcome.sweep_csv {
                println!("sweep:  {}", path.display());
            }
            let r = &outcome.report;
            match r.quant_ppl {
                Some(q) => println!("fp ppl: {:.4}   quant ppl: {:.4}", r.fp_ppl, q),
                None => println!("fp ppl: {:.4}", r.fp_ppl),
            }
        }
        Command::Sweep { configs, out } => {
            let outcome = runner::run_sweep(&configs, out.as_deref())?;
            for cell in &outcome.cells {
                if let Some(error) = &cell.error {
                    eprintln!("cell {}: {error}", cell.method);
                }
            }
            println!("combined csv: {}", outcome.csv_path.display());
        }
        Command::ExportAttn { config, checkpoint, index, out } => {
            let cfg = load_config(&config, None)?;
            let outcome = runner::run_export_attn(&cfg, &checkpoint, index, out.as_deref())?;
            println!(
                "wrote {} attention matrices to {}",
                outcome.matrices.len(),
                outcome.out_dir.display()
            );
        }
        Command::GenCorpus { seed, bytes, out } => {
            let text = synth_corpus(seed, bytes);
            std::fs::write(&out, &text).map_err(LabError::Io)?;
            println!("wrote {} bytes to {}", text.len(), out.display());
        }
    }
    Ok(())
}

fn exit_code(error: &LabError) -> u8 {
    match error {
        LabError::Io(_) => 4,
        LabError::Diverged { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(exit_code(&error))
        }
    }
}
