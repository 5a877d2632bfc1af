//! `lenforge` command-line pipeline.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 runtime or training
//! error. Data goes to files or standard output, diagnostics to standard
//! error.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{Opts, RunConfig};
use crate::failure::{Failure, EXIT_USAGE};

#[derive(Parser, Debug)]
#[command(name = "lenforge", version, about = "Train and evaluate length-controlled generation")]
struct Cli {
    #[command(flatten)]
    opts: Opts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Measure each line of a text file (or each response of a JSONL corpus).
    Measure {
        /// Input file; standard input when omitted or `-`.
        input: Option<PathBuf>,
        /// Read a prompt/response JSONL corpus instead of plain lines.
        #[arg(long)]
        jsonl: bool,
    },
    /// Write a seeded synthetic prompt/response corpus.
    Synthesize {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        min_len: usize,
        #[arg(long, default_value_t = 50)]
        max_len: usize,
        #[arg(long, default_value = "abcdefghijklmnopqrstuvwxyz ")]
        alphabet: String,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Append a length-requirement sentence to every prompt.
    Augment {
        input: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Split JSONL lines into train.jsonl, eval.jsonl and test.jsonl.
    Split {
        input: Option<PathBuf>,
        #[arg(long, default_value = "0.8,0.1,0.1")]
        fractions: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Sample candidate responses from a checkpoint for each augmented record.
    Candidates {
        input: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Samples per record; the gold response is always added first.
        #[arg(short, long, default_value_t = 4)]
        k: usize,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Turn candidate sets into preference pairs ranked by length reward.
    Pairs {
        input: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Train the toy policy for one stage, writing one checkpoint per epoch.
    Train {
        #[arg(long, value_parser = ["sft", "dpo", "orpo", "ppo"])]
        stage: String,
        /// Augmented records (sft, ppo) or preference pairs (dpo, orpo).
        input: Option<PathBuf>,
        /// Starting checkpoint; defaults to the reference for dpo and ppo.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint on augmented records, or score a records CSV.
    Evaluate {
        input: Option<PathBuf>,
        #[arg(long, conflicts_with = "records")]
        checkpoint: Option<PathBuf>,
        /// CSV of id,metric,target,actual[,signed_deviation_pct].
        #[arg(long)]
        records: Option<PathBuf>,
        /// Also probe the held-out word-count metric.
        #[arg(long)]
        probe_words: bool,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Percent change of a candidate report against a baseline report.
    Compare {
        baseline: PathBuf,
        candidate: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Render a report as an SVG histogram panel (or CSV/JSON with --format).
    Report {
        input: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Print a checkpoint's stage, epoch and digests.
    Describe { checkpoint: PathBuf },
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config = RunConfig::resolve(cli.opts)?;
    match cli.command {
        Command::Measure { input, jsonl } => commands::measure(&config, input.as_deref(), jsonl),
        Command::Synthesize { n, min_len, max_len, alphabet, output } => {
            commands::synthesize(&config, n, (min_len, max_len), &alphabet, output.as_deref())
        }
        Command::Augment { input, output } => commands::augment(&config, input.as_deref(), output.as_deref()),
        Command::Split { input, fractions, out_dir } => {
            commands::split(&config, input.as_deref(), &fractions, &out_dir)
        }
        Command::Candidates { input, checkpoint, k, output } => {
            commands::candidates(&config, input.as_deref(), &checkpoint, k, output.as_deref())
        }
        Command::Pairs { input, output } => commands::pairs(&config, input.as_deref(), output.as_deref()),
        Command::Train { stage, input, init, out_dir } => {
            commands::train(&config, &stage, input.as_deref(), init.as_deref(), &out_dir)
        }
        Command::Evaluate { input, checkpoint, records, probe_words, output } => commands::evaluate(
            &config,
            input.as_deref(),
            checkpoint.as_deref(),
            records.as_deref(),
            probe_words,
            output.as_deref(),
        ),
        Command::Compare { baseline, candidate, output } => commands::compare(&baseline, &candidate, output.as_deref()),
        Command::Report { input, output } => commands::report(&config, &input, output.as_deref()),
        Command::Describe { checkpoint } => commands::describe(&checkpoint),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            log::error!("{failure}");
            ExitCode::from(failure.code)
        }
    }
}
