//! `protorel` — train, evaluate, and build corpora for the few-shot
//! relation classifier.
//!
//! Exit codes: 0 success, 1 validation failure, 2 I/O failure, 3 internal
//! error.

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use protorel_cli::commands::{self, AlignArgs, EvalArgs, SampleArgs, TrainArgs};

#[derive(Parser)]
#[command(
    name = "protorel",
    version,
    about = "Few-shot relation classification: episodic training, prototype evaluation, corpus alignment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a metrics log.
    Train {
        /// Key-value config file; defaults apply for unset keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training corpus (JSONL instances).
        #[arg(long)]
        train: PathBuf,
        /// Cross-domain corpus for the enrichment phase.
        #[arg(long)]
        cross: Option<PathBuf>,
        /// Held-out test corpus: checked for relation disjointness and added
        /// to the vocabulary (tokens only, never instances).
        #[arg(long)]
        test: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Metrics log output path (JSONL; first line echoes the config).
        #[arg(long)]
        metrics: PathBuf,
        /// Override a config key, e.g. --set seed=7. Repeatable; wins over
        /// the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Evaluate a checkpoint on a test corpus with prototype matching.
    Eval {
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test corpus (JSONL instances).
        #[arg(long)]
        test: PathBuf,
        /// Classes per task.
        #[arg(long, default_value_t = 5)]
        way: usize,
        /// Support instances per class.
        #[arg(long, default_value_t = 1)]
        shots: usize,
        /// Query instances per class.
        #[arg(long, default_value_t = 1)]
        queries: usize,
        /// Number of sampled tasks.
        #[arg(long, default_value_t = 2000)]
        tasks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write a machine-readable JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Label a raw corpus against an entity dictionary and emit two-entity
    /// candidate instances.
    Align {
        /// Raw corpus, one sentence per line.
        #[arg(long)]
        corpus: PathBuf,
        /// Dictionary file, one surface<TAB>type entry per line.
        #[arg(long)]
        dictionary: PathBuf,
        /// Optional word segmentation, tab-separated words per corpus line;
        /// enables the word-boundary filter and word-level output.
        #[arg(long)]
        segmentation: Option<PathBuf>,
        /// Candidate output path (JSONL instances, relation UNLABELED).
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a statistics table for one or more corpora.
    Stats {
        /// Corpus files (JSONL instances).
        paths: Vec<PathBuf>,
    },
    /// Sample one episode and dump it as JSON (debugging aid).
    SampleEpisode {
        /// Corpus to sample from (JSONL instances).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        way: usize,
        #[arg(long, default_value_t = 5)]
        shots: usize,
        #[arg(long, default_value_t = 5)]
        queries: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        max_len: usize,
    },
}

fn run(cli: Cli) -> Result<(), commands::CliError> {
    match cli.command {
        Command::Train {
            config,
            train,
            cross,
            test,
            checkpoint,
            metrics,
            sets,
        } => commands::cmd_train(TrainArgs {
            config,
            train,
            cross,
            test,
            checkpoint,
            metrics,
            sets,
        }),
        Command::Eval {
            checkpoint,
            test,
            way,
            shots,
            queries,
            tasks,
            seed,
            report,
        } => commands::cmd_eval(EvalArgs {
            checkpoint,
            test,
            way,
            shots,
            queries,
            tasks,
            seed,
            report,
        }),
        Command::Align {
            corpus,
            dictionary,
            segmentation,
            out,
        } => commands::cmd_align(AlignArgs {
            corpus,
            dictionary,
            segmentation,
            out,
        }),
        Command::Stats { paths } => commands::cmd_stats(&paths),
        Command::SampleEpisode {
            data,
            way,
            shots,
            queries,
            seed,
            max_len,
        } => commands::cmd_sample_episode(SampleArgs {
            data,
            way,
            shots,
            queries,
            seed,
            max_len,
        }),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; anything else is a
            // usage problem, which is a validation failure.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
