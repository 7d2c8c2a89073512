mod commands;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dbmnet::evaluator::Ranking;

/// Train and evaluate view-invariant action classifiers.
#[derive(Debug, Parser)]
#[command(name = "dbmnet", version)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Preset to start from (desk, paper, tiny); overrides the file's `preset`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Override one key, e.g. `--set train.epochs=5`. May be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RankingArg {
    Restricted,
    Full,
}

impl From<RankingArg> for Ranking {
    fn from(r: RankingArg) -> Self {
        match r {
            RankingArg::Restricted => Ranking::Restricted,
            RankingArg::Full => Ranking::Full,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write it as a PNG directory tree.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// Destination root (`<out>/<view>/<action>/*.png`).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on all views except `data.test_view` (default: the last view).
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root in `<view>/<action>/<image>` layout.
        #[arg(long)]
        data: PathBuf,
        /// Only evaluate this view.
        #[arg(long)]
        view: Option<String>,
        /// JSON map from dataset action names to checkpoint action names or "DROP".
        #[arg(long)]
        label_map: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "restricted")]
        ranking: RankingArg,
        /// Output directory (default: `eval/` beside the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Leave-one-camera-out: one training run per held-out view.
    Loco {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// View classification with nearest class centroids before and after the gate.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Rebuild the training and validation split of this run configuration.
        #[command(flatten)]
        config: ConfigArgs,
        /// Training dataset root; use with `--val` instead of a configuration.
        #[arg(long, requires = "val", conflicts_with = "config")]
        train: Option<PathBuf>,
        #[arg(long, requires = "train")]
        val: Option<PathBuf>,
        /// Output directory (default: `probe/` beside the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients in double precision.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        /// Output directory (default: the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();

    let result = match cli.command {
        Command::Synth { config, out } => commands::synth(&config, &out),
        Command::Train { config } => commands::train(&config),
        Command::Eval {
            checkpoint,
            data,
            view,
            label_map,
            ranking,
            out,
        } => commands::eval(
            &checkpoint,
            &data,
            view.as_deref(),
            label_map.as_deref(),
            ranking.into(),
            out.as_deref(),
        ),
        Command::Loco { config } => commands::loco(&config),
        Command::Probe {
            checkpoint,
            config,
            train,
            val,
            out,
        } => commands::probe(&checkpoint, &config, train.zip(val), out.as_deref()),
        Command::Gradcheck {
            config,
            epsilon,
            out,
        } => commands::gradcheck(&config, epsilon, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("{}", failure.to_json_line());
            ExitCode::from(failure.code)
        }
    }
}
