use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod error;
mod record;

/// Distils a speech encoder into a smaller student and fine-tunes it for
/// keyword spotting and speaker verification.
#[derive(Debug, Parser)]
#[command(name = "kdsrl", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Config file (`key = value` lines). `count-params` also accepts
    /// `base-reference`.
    #[arg(long, global = true)]
    config: Option<String>,
    /// Output directory, created if absent.
    #[arg(long, global = true, env = "KDSRL_OUT", default_value = "runs")]
    out: PathBuf,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Corpus manifest. Defaults to `<out>/data/manifest.tsv`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Tasks {
    Kws,
    Sv,
    Multi,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize the keyword/speaker corpus.
    GenData,
    /// Train the teacher encoder on both tasks.
    TrainTeacher,
    /// Distil the teacher into a shallow student.
    Distill {
        /// Teacher checkpoint. Defaults to `<out>/teacher.ckpt`.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Fine-tune the distilled student with fresh task heads.
    Finetune {
        #[arg(long, value_enum, default_value = "multi")]
        tasks: Tasks,
        /// Keep the encoder fixed and train only the heads.
        #[arg(long)]
        freeze: bool,
        /// Student checkpoint. Defaults to `<out>/student.ckpt`.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue from the run's resume checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this iteration, leaving a resume checkpoint.
        #[arg(long, value_name = "ITERATION")]
        stop_after: Option<usize>,
    },
    /// Score a checkpoint on the test split.
    Evaluate {
        /// Checkpoint to score. Defaults to `<out>/finetune_multi.ckpt`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Print teacher and student parameter totals.
    CountParams,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli.common, &cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code())
        }
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainTeacher => "train-teacher",
            Command::Distill { .. } => "distill",
            Command::Finetune { .. } => "finetune",
            Command::Evaluate { .. } => "evaluate",
            Command::CountParams => "count-params",
        }
    }
}
