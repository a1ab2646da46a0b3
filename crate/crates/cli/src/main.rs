//! `advmlm`: configure, launch, resume, and inspect adversarial-contrastive
//! MLM pre-training runs and their random-masking baselines.
//!
//! Exit codes: 0 success, 1 runtime fault, 2 invalid configuration/usage.

mod commands;
mod config;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::eval::{EvalOpts, Masking};
use commands::inspect::InspectOpts;
use commands::pretrain::PretrainOpts;
use config::ConfigErrors;

#[derive(Parser)]
#[command(
    name = "advmlm",
    about = "Adversarial contrastive masked-language-model pre-training",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run adversarial pre-training (alternating noiser/encoder cycles).
    Pretrain(TrainArgs),
    /// Run the random-masking baseline at rho_adv + rho_rand total masking.
    Baseline(TrainArgs),
    /// Evaluate a frozen checkpoint under random/adversarial masking.
    Eval(EvalArgs),
    /// Show any-mask probabilities and sampled decisions for sequences.
    InspectMasks(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Config file (flat JSON object; see README for the key set).
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. --set max_steps=40 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (defaults under $ADVMLM_OUT_ROOT keyed by the
    /// config fingerprint).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from the latest checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Stop this invocation after N update steps (checkpointing as usual),
    /// without changing the configured max_steps.
    #[arg(long, value_name = "N")]
    stop_after: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory holding config.resolved.json and checkpoints/.
    #[arg(long)]
    run_dir: PathBuf,
    /// Specific checkpoint file (default: latest in the run dir).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "both")]
    masking: Masking,
    /// Masking budget for the evaluation (default: the run's rho_adv).
    #[arg(long)]
    rate: Option<f64>,
    /// Evaluate on this corpus instead of the run's configured one.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Corpus format for --corpus: fasta or lines.
    #[arg(long)]
    format: Option<String>,
    /// Cap the number of evaluated batches.
    #[arg(long)]
    max_batches: Option<usize>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Sequence to inspect (repeatable).
    #[arg(long = "seq")]
    seq: Vec<String>,
    /// File with one sequence per line.
    #[arg(long)]
    seqs_file: Option<PathBuf>,
    /// Write machine-readable NDJSON records here.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Sampling seed (default derived from the run config).
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(args) => run_training(args, false),
        Command::Baseline(args) => run_training(args, true),
        Command::Eval(args) => commands::eval::run(EvalOpts {
            run_dir: args.run_dir,
            checkpoint: args.checkpoint,
            masking: args.masking,
            rate: args.rate,
            corpus: args.corpus,
            corpus_format: args.format,
            max_batches: args.max_batches,
        }),
        Command::InspectMasks(args) => commands::inspect::run(InspectOpts {
            run_dir: args.run_dir,
            checkpoint: args.checkpoint,
            seqs: args.seq,
            seqs_file: args.seqs_file,
            records: args.records,
            seed: args.seed,
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{err:#}");
            if err.is::<ConfigErrors>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run_training(args: TrainArgs, baseline: bool) -> anyhow::Result<()> {
    let out = match args.out {
        Some(out) => out,
        None => {
            let root = std::env::var("ADVMLM_OUT_ROOT").map_err(|_| {
                ConfigErrors(vec![
                    "--out is required (or set ADVMLM_OUT_ROOT for a default root)".into(),
                ])
            })?;
            let cfg = config::RunConfig::load(&args.config, &args.set)?;
            let mut cfg = cfg;
            if baseline {
                cfg.run_mode = "baseline".into();
            }
            PathBuf::from(root).join(format!("run-{}", &cfg.fingerprint_hex()[..16]))
        }
    };
    commands::pretrain::run(PretrainOpts {
        config: args.config,
        overrides: args.set,
        out,
        resume: args.resume,
        force: args.force,
        baseline,
        stop_after: args.stop_after,
    })
}
