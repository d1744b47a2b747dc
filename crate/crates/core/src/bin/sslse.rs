//! Command-line entry points for the pre-training / enhancement pipeline.
//!
//! Every command resolves a line-oriented config (defaults overlaid with
//! `--config`), writes into a run directory owned by a lock file, and
//! exits 0 on success or 1 with a single `error<TAB>message` line on
//! stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use sslse_core::commands::{self, Condition, MaskMode};
use sslse_core::config::{reference_config, RunConfig};
use sslse_core::verify::GRADCHECK_TOLERANCE;

#[derive(Parser)]
#[command(
    name = "sslse",
    version,
    about = "Masked-predictive speech pre-training and magnitude-mask enhancement toolkit"
)]
struct Cli {
    /// Line-oriented `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the invoked command's primary seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (default: $SSLSE_RUN_ROOT/<command>-<confighash>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Numeric precision: f32 or f64.
    #[arg(long, global = true)]
    precision: Option<String>,
    /// Parallel workers for simulation and evaluation.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a paired noisy/clean corpus with recipes.
    Simulate,
    /// Apply resource-condition limits to the configured manifests.
    Subset,
    /// Build the discrete-target codebook from clean speech.
    QuantizeTargets,
    /// Masked-prediction pre-training of the encoder.
    Pretrain,
    /// Magnitude-mask fine-tuning on simulated pairs.
    Finetune,
    /// Enhance one WAV file.
    Enhance {
        /// Noisy input WAV.
        #[arg(long)]
        input: PathBuf,
        /// Clean reference (oracle mode only).
        #[arg(long)]
        clean: Option<PathBuf>,
        /// Mask source: model, oracle or identity.
        #[arg(long, default_value = "model")]
        mode: String,
        /// Fine-tuned checkpoint (mode = model).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a paired manifest and write a report.
    Evaluate {
        /// Paired manifest (pairs.tsv); defaults to evaluate.pairs.
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Mask source: model, oracle or identity.
        #[arg(long, default_value = "model")]
        mode: String,
        /// Fine-tuned checkpoint (mode = model).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference verification of every op and composite.
    Gradcheck {
        /// Random instances per op.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Chain subset -> pretrain -> finetune -> evaluate for one resource
    /// condition and emit the five-row comparison table.
    ReproduceCondition {
        /// low-speech, low-noise, high or low-pretrain.
        condition: String,
    },
    /// Print the full configuration reference with defaults.
    ConfigReference,
}

fn seed_key(command: &Command) -> Option<&'static str> {
    match command {
        Command::Simulate => Some("simulate.seed"),
        Command::Subset => Some("subset.seed"),
        Command::QuantizeTargets | Command::Pretrain => Some("pretrain.seed"),
        Command::Finetune => Some("finetune.seed"),
        Command::ReproduceCondition { .. } => Some("reproduce.seed"),
        _ => None,
    }
}

fn command_name(command: &Command) -> &'static str {
    match command {
        Command::Simulate => "simulate",
        Command::Subset => "subset",
        Command::QuantizeTargets => "quantize-targets",
        Command::Pretrain => "pretrain",
        Command::Finetune => "finetune",
        Command::Enhance { .. } => "enhance",
        Command::Evaluate { .. } => "evaluate",
        Command::Gradcheck { .. } => "gradcheck",
        Command::ReproduceCondition { .. } => "reproduce-condition",
        Command::ConfigReference => "config-reference",
    }
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        if let Some(key) = seed_key(&cli.command) {
            cfg.set(key, &seed.to_string())?;
        }
    }
    if let Some(precision) = &cli.precision {
        cfg.set("precision", precision)?;
    }
    if let Some(workers) = cli.workers {
        cfg.set("workers", &workers.to_string())?;
    }
    let out = cli
        .out
        .unwrap_or_else(|| commands::default_out_dir(command_name(&cli.command), &cfg));

    match &cli.command {
        Command::Simulate => {
            let pairs = commands::cmd_simulate(&cfg, &out)?;
            println!("pairs\t{}", pairs.display());
        }
        Command::Subset => {
            let (speech, noise) = commands::cmd_subset(&cfg, &out)?;
            println!("speech_subset\t{}", speech.display());
            println!("noise_subset\t{}", noise.display());
        }
        Command::QuantizeTargets => {
            let path = commands::cmd_quantize_targets(&cfg, &out)?;
            println!("codebook\t{}", path.display());
        }
        Command::Pretrain => {
            let ckpt = commands::cmd_pretrain(&cfg, &out)?;
            println!("checkpoint\t{}", ckpt.display());
        }
        Command::Finetune => {
            let ckpt = commands::cmd_finetune(&cfg, &out)?;
            println!("checkpoint\t{}", ckpt.display());
        }
        Command::Enhance {
            input,
            clean,
            mode,
            checkpoint,
        } => {
            let mode: MaskMode = mode.parse()?;
            let path = commands::cmd_enhance(
                &cfg,
                &out,
                input,
                clean.as_deref(),
                mode,
                checkpoint.as_deref(),
            )?;
            println!("enhanced\t{}", path.display());
        }
        Command::Evaluate {
            pairs,
            mode,
            checkpoint,
        } => {
            let mode: MaskMode = mode.parse()?;
            let (path, report) = commands::cmd_evaluate(
                &cfg,
                &out,
                pairs.as_deref(),
                mode,
                checkpoint.as_deref(),
            )?;
            println!("report\t{}", path.display());
            println!(
                "mean_sdr\tnoisy {:.3}\tenhanced {:.3}\toracle {:.3}",
                report.mean_sdr_noisy, report.mean_sdr_enhanced, report.mean_sdr_oracle
            );
        }
        Command::Gradcheck { instances } => {
            let report = commands::cmd_gradcheck(*instances, 20_240_817)?;
            for r in &report.reports {
                println!("{}\t{:.3e}\t{} coords", r.name, r.max_rel_err, r.coords_checked);
            }
            let pass = report.passed();
            println!(
                "gradcheck\tmax_rel_err {:.3e}\ttolerance {GRADCHECK_TOLERANCE:.0e}\t{}",
                report.max_rel_err,
                if pass { "PASS" } else { "FAIL" }
            );
            return Ok(pass);
        }
        Command::ReproduceCondition { condition } => {
            let condition: Condition = condition.parse()?;
            let (path, comparison) = commands::cmd_reproduce(&cfg, condition, &out)?;
            print!("{}", comparison.to_text());
            println!("comparison\t{}", path.display());
        }
        Command::ConfigReference => {
            print!("{}", reference_config());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error\t{e:#}");
            ExitCode::FAILURE
        }
    }
}
