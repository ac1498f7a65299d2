//! `uidlm` command line: prepare data, train, sweep, evaluate, sample, and test significance.
//!
//! Exit status is 0 on success, 2 for I/O failures, 3 for invalid input or
//! configuration, and 4 when training fails. `UIDLM_LOG` sets log verbosity
//! (`error` through `trace`, default `info`); logs go to stderr.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use uidlm::eval::DEFAULT_SAMPLE_CAP;
use uidlm::objective::RegularizerKind;
use uidlm::stats::Resampling;

pub use error::{CliError, ExitKind};

#[derive(Debug, Parser)]
#[command(name = "uidlm", version, about = "Train and analyze surprisal-regularized language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Regularizer {
    Variance,
    LocalConsistency,
    Max,
}

impl From<Regularizer> for RegularizerKind {
    fn from(r: Regularizer) -> Self {
        match r {
            Regularizer::Variance => RegularizerKind::Variance,
            Regularizer::LocalConsistency => RegularizerKind::LocalConsistency,
            Regularizer::Max => RegularizerKind::Max,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split a corpus (one sequence per line) and build the vocabulary.
    Prepare {
        #[arg(long)]
        input: PathBuf,
        /// Vocabulary size including the four reserved ids.
        #[arg(long)]
        vocab_size: usize,
        #[arg(long, value_delimiter = ',', num_args = 3, default_value = "0.8,0.1,0.1")]
        ratios: Vec<f64>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lowercase: bool,
    },
    /// Train one model from an experiment file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train one model per β and write a table of dev and test metrics.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        betas: Option<Vec<f64>>,
        /// Defaults to the config's regularizer, or variance if it has none.
        #[arg(long)]
        regularizer: Option<Regularizer>,
    },
    /// Train baseline and both UID regularizers on nested subsets of the train split.
    Ablation {
        #[arg(long)]
        config: PathBuf,
        /// Subset sizes in predicted tokens.
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        #[arg(long)]
        beta: f64,
        #[arg(long)]
        seed: u64,
    },
    /// Score a held-out file and print an evaluation report as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        lowercase: bool,
        /// Also report the variance of all surprisals pooled together.
        #[arg(long)]
        pooled: bool,
        #[arg(long, default_value_t = 4096)]
        max_tokens: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write per-token surprisals as CSV.
        #[arg(long)]
        surprisals: Option<PathBuf>,
    },
    /// Draw ancestral samples and print a generation report as JSON.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        k: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_SAMPLE_CAP)]
        cap: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Paired permutation test on per-sequence scores of two models.
    Significance {
        /// Surprisal CSV from `eval --surprisals`, or one score per line.
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        resamples: usize,
        /// Enumerate all sign flips (at most 30 pairs).
        #[arg(long)]
        exhaustive: bool,
    },
    /// Generate a corpus from a Markov source and print its entropy rate.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn execute(command: Command) -> Result<String, CliError> {
    use commands::*;
    match command {
        Command::Prepare {
            input,
            vocab_size,
            ratios,
            seed,
            out,
            lowercase,
        } => prepare(&PrepareArgs {
            input: &input,
            vocab_size,
            ratios: [ratios[0], ratios[1], ratios[2]],
            seed,
            out: &out,
            lowercase,
        }),
        Command::Train { config } => train_cmd(&config),
        Command::Sweep {
            config,
            betas,
            regularizer,
        } => sweep_cmd(
            &config,
            betas.as_deref().unwrap_or(&DEFAULT_BETAS),
            regularizer.map(Into::into),
        ),
        Command::Ablation {
            config,
            sizes,
            beta,
            seed,
        } => ablation_cmd(&config, &sizes, beta, seed),
        Command::Eval {
            checkpoint,
            vocab,
            test,
            lowercase,
            pooled,
            max_tokens,
            out,
            surprisals,
        } => eval_cmd(&EvalArgs {
            checkpoint: &checkpoint,
            vocab: &vocab,
            test: &test,
            lowercase,
            pooled,
            max_tokens,
            out: out.as_deref(),
            surprisals: surprisals.as_deref(),
        }),
        Command::Sample {
            checkpoint,
            vocab,
            k,
            seed,
            cap,
            out,
            report,
        } => sample_cmd(&SampleArgs {
            checkpoint: &checkpoint,
            vocab: &vocab,
            k,
            seed,
            cap,
            out: &out,
            report: report.as_deref(),
        }),
        Command::Significance {
            a,
            b,
            seed,
            resamples,
            exhaustive,
        } => {
            let mode = if exhaustive {
                Resampling::Exhaustive
            } else {
                Resampling::Auto(resamples)
            };
            significance_cmd(&a, &b, mode, seed)
        }
        Command::Synth { spec, n, seed, out } => synth_cmd(&spec, n, seed, &out),
    }
}

/// Parses `args`, runs the command, prints its output, and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitKind::Validation as i32 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(text) => {
            let _ = std::io::stdout().write_all(text.as_bytes());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}
