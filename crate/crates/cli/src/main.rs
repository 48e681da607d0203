//! `hiergrpo`: generate synthetic verification data, train policies with
//! group-relative policy optimization, and evaluate or audit reasoning traces.

mod commands;
mod config;
mod error;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hiergrpo::reward::RewardVariant;
use hiergrpo::synthworld::Split;
use hiergrpo::taxonomy::AttributeMode;

use commands::{Context, EvalOptions, Outcome, ReportOptions, ScoreOptions, TrainOptions};
use config::{Overrides, RunConfig};
use error::CliError;

#[derive(Parser)]
#[command(
    name = "hiergrpo",
    version,
    about = "Hierarchical-reward GRPO for pairwise verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world and its pair manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory (default: <run dir>/data).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a policy on the manifest's train split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overwrite an existing run in the train directory.
        #[arg(long)]
        force: bool,
        /// Continue from the last checkpoint.
        #[arg(long, conflicts_with = "force")]
        resume: bool,
        /// Checkpoint and exit once this many steps have run.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Greedy-decode a split and write traces, report and tables.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Policy checkpoint (default: <run dir>/train/policy.json).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        /// Evaluate the freshly initialized policy instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        untrained: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score an external trace corpus (JSONL of {"pair_id","trace"}).
    ScoreTraces {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-render tables from one or more report.json files (NAME=PATH or PATH).
    Report {
        #[arg(required = true)]
        reports: Vec<String>,
        /// Also write a machine-readable comparison.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Also write the rendered tables to a file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Run config (JSON).
    #[arg(long, short)]
    config: PathBuf,
    /// Run directory (default: paths.run_dir, else $HIERGRPO_RUN_ROOT/<config name>).
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Pair manifest (default: paths.manifest, else <run dir>/data/pairs.jsonl).
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Structure-reward weight.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_enum)]
    reward_mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Concrete,
    Binary,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Intermediate,
    AnswerOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl Common {
    fn context(&self) -> Result<Context, CliError> {
        let overrides = Overrides {
            seed: self.seed,
            lambda: self.lambda,
            reward_mode: self.reward_mode.map(|m| match m {
                ModeArg::Concrete => AttributeMode::Concrete,
                ModeArg::Binary => AttributeMode::Binary,
            }),
            variant: self.variant.map(|v| match v {
                VariantArg::Intermediate => RewardVariant::Intermediate,
                VariantArg::AnswerOnly => RewardVariant::AnswerOnly,
            }),
        };
        let cfg = RunConfig::load(&self.config, &overrides)?;
        let run_dir = rundir::resolve(
            self.run_dir.as_deref(),
            cfg.paths.run_dir.as_deref(),
            &self.config,
        );
        let manifest = self
            .manifest
            .clone()
            .or_else(|| cfg.paths.manifest.clone())
            .unwrap_or_else(|| run_dir.join("data").join("pairs.jsonl"));
        Ok(Context {
            cfg,
            run_dir,
            manifest,
        })
    }
}

fn run(cli: Cli) -> Result<Outcome, CliError> {
    match cli.command {
        Command::GenData { common, out } => commands::gen_data(&common.context()?, out.as_deref()),
        Command::Train {
            common,
            force,
            resume,
            stop_after,
        } => commands::train(
            &common.context()?,
            &TrainOptions {
                force,
                resume,
                stop_after,
            },
        ),
        Command::Eval {
            common,
            checkpoint,
            split,
            untrained,
            out,
        } => {
            let split = split.map(|s| match s {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            });
            commands::eval(
                &common.context()?,
                &EvalOptions {
                    checkpoint,
                    split,
                    untrained,
                    out,
                },
            )
        }
        Command::ScoreTraces {
            common,
            traces,
            out,
        } => commands::score_traces(&common.context()?, &ScoreOptions { traces, out }),
        Command::Report { reports, json, out } => commands::report(&ReportOptions {
            inputs: reports,
            json,
            out,
        }),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(5),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
