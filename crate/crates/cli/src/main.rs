//! `actjepa`: collect demonstrations, train, probe, evaluate, alternate and
//! report from a single binary.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use actjepa::model::ModelKind;
use actjepa::Error;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "actjepa", version, about = "Action-chunking policies with latent observation prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Reach,
    Push,
    Pickplace,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Actjepa,
    Act,
    Rbc,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Actjepa => ModelKind::ActJepa,
            ModelArg::Act => ModelKind::Act,
            ModelArg::Rbc => ModelKind::Rbc,
        }
    }
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=3e-4`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Record scripted-expert demonstrations into a dataset directory.
    Collect {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        chunk_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model into `OUT/<model>_seed<S>/`.
    Train {
        #[arg(long, value_enum)]
        model: ModelArg,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        train_seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the run directory's last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop once this many epochs are done, leaving a resumable run.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Alternate latent pretraining epochs with throwaway fine-tunes.
    Alternate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit linear probes on a frozen encoder.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        probe_seeds: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll out checkpoints on the task suite.
    Eval {
        /// Glob matching checkpoint files.
        #[arg(long)]
        checkpoints: String,
        #[arg(long, default_value_t = 10)]
        eval_seeds: usize,
        #[arg(long, value_enum, default_value = "all")]
        task: TaskArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge eval, probe and alternation outputs found under a directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline: collect, train 3 models x 3 seeds, probe, eval,
    /// alternate, report.
    Repro {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        episodes: usize,
        #[arg(long, default_value_t = 10)]
        alternate_epochs: usize,
    },
}

fn task_names(t: TaskArg) -> Vec<&'static str> {
    match t {
        TaskArg::Reach => vec!["reach"],
        TaskArg::Push => vec!["push"],
        TaskArg::Pickplace => vec!["pickplace"],
        TaskArg::All => vec!["reach", "push", "pickplace"],
    }
}

fn run(cli: Cli) -> actjepa::Result<()> {
    match cli.command {
        Command::Collect {
            task,
            episodes,
            seed,
            chunk_size,
            out,
        } => commands::collect(&task_names(task), episodes, seed, chunk_size, &out).map(|_| ()),
        Command::Train {
            model,
            config,
            data,
            train_seed,
            out,
            resume,
            stop_after,
        } => {
            let cfg = config::RunConfig::load(config.config.as_deref(), &config.overrides)?;
            let opts = commands::TrainOptions {
                kind: model.into(),
                train_seed,
                resume,
                stop_after,
            };
            commands::train(cfg, &data, &out, &opts).map(|_| ())
        }
        Command::Alternate {
            config,
            data,
            epochs,
            out,
        } => {
            let cfg = config::RunConfig::load(config.config.as_deref(), &config.overrides)?;
            commands::alternate(cfg, &data, epochs, &out).map(|_| ())
        }
        Command::Probe {
            checkpoint,
            config,
            data,
            probe_seeds,
            out,
        } => {
            let cfg = config::RunConfig::load(config.config.as_deref(), &config.overrides)?;
            commands::probe(&cfg, &checkpoint, &data, probe_seeds, &out).map(|_| ())
        }
        Command::Eval {
            checkpoints,
            eval_seeds,
            task,
            out,
        } => commands::eval(&checkpoints, eval_seeds, &task_names(task), &out).map(|_| ()),
        Command::Report { runs, out } => report::report(&runs, &out),
        Command::Repro {
            config,
            out,
            episodes,
            alternate_epochs,
        } => {
            let cfg = config::RunConfig::load(config.config.as_deref(), &config.overrides)?;
            commands::repro(cfg, &out, episodes, alternate_epochs)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Diverged { .. } => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
