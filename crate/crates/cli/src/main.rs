use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use humorlab::harness::{self, Command, RunOptions};
use humorlab::influence::{Method, RankMode};
use humorlab::textmodel::Head;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Sub {
    /// Load the corpus (or generate a synthetic one) into the output directory.
    Synth,
    /// Build the keyword-filtered, class-balanced train/test splits.
    Subset,
    /// Masked-token pretraining of the encoder.
    Pretrain,
    /// Train the selected heads on the full training split.
    Train,
    /// Evaluate the heads and run the few-shot protocol.
    Eval,
    /// Influence reports for the sampled test examples.
    Influence,
    /// Leave-one-out retraining sweep against influence scores.
    Loo,
    /// Top-K offense tables and histograms.
    Report,
    /// Gradient, HVP and inverse-HVP verification suite.
    Check,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Self {
        match s {
            Sub::Synth => Command::Synth,
            Sub::Subset => Command::Subset,
            Sub::Pretrain => Command::Pretrain,
            Sub::Train => Command::Train,
            Sub::Eval => Command::Eval,
            Sub::Influence => Command::Influence,
            Sub::Loo => Command::Loo,
            Sub::Report => Command::Report,
            Sub::Check => Command::Check,
        }
    }
}

/// Humor classifiers, finetuned or prompted, and the training data that
/// drives their predictions.
#[derive(Debug, Parser)]
#[command(name = "humorlab", version)]
struct Cli {
    #[arg(value_enum)]
    command: Sub,
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory shared by all subcommands.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    head: Option<Head>,
    #[arg(long)]
    mode: Option<RankMode>,
    /// Top-K cutoff for the offense table; may be repeated.
    #[arg(long = "k")]
    ks: Vec<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(2);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    let opts = RunOptions {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        method: cli.method,
        head: cli.head,
        mode: cli.mode,
        ks: cli.ks,
    };
    match harness::run(cli.command.into(), &opts) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("humorlab: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
