//! Command-line front end: `sbl <command> --config <path> [--set key=value ...]
//! [--out <dir>] [--seed N] [--force]`.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod exit;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{LoadedConfig, OUTPUT_ROOT_ENV};
use exit::{exit_code, EXIT_CONFIG, EXIT_OK};
use sbl_core::TapId;

#[derive(Debug, Parser)]
#[command(name = "sbl", version, about = "Salience-biased focal-loss detector training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.learning_rate=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Run directory. Defaults to `<root>/<command>`, where the root comes from
    /// `output.root`, then the environment, then `./runs`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for this command: `synth.seed` for synth, `train.seed` otherwise.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overwrite existing primary artifacts.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(#[command(flatten)] Common),
    /// Compute salience statistics over the training corpus.
    Stats(#[command(flatten)] Common),
    /// Train a detector.
    Train(#[command(flatten)] Common),
    /// Evaluate a checkpoint on the test corpus.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// List the most and least salient training images.
    Rank {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Feature tap; defaults to `train.tap`.
        #[arg(long)]
        tap: Option<TapId>,
    },
    /// Detect objects in an image or a directory of PNG images.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
    },
    /// Train and evaluate over a grid of weighting settings and seeds.
    Ablate(#[command(flatten)] Common),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Stats(_) => "stats",
            Command::Train(_) => "train",
            Command::Eval { .. } => "eval",
            Command::Rank { .. } => "rank",
            Command::Predict { .. } => "predict",
            Command::Ablate(_) => "ablate",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Synth(c) | Command::Stats(c) | Command::Train(c) | Command::Ablate(c) => c,
            Command::Eval { common, .. } | Command::Rank { common, .. } | Command::Predict { common, .. } => common,
        }
    }
}

fn output_root(loaded: &LoadedConfig) -> PathBuf {
    loaded
        .config
        .output
        .root
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Executes a parsed command and returns its summary text.
pub fn execute(cli: &Cli) -> anyhow::Result<String> {
    let common = cli.command.common();
    let mut overrides = common.set.clone();
    if let Some(seed) = common.seed {
        let key = if matches!(cli.command, Command::Synth(_)) {
            "synth.seed"
        } else {
            "train.seed"
        };
        overrides.push(format!("{key}={seed}"));
    }
    let loaded = LoadedConfig::load(common.config.as_deref(), &overrides)?;
    let root = output_root(&loaded);
    let out = common.out.clone().unwrap_or_else(|| root.join(cli.command.name()));
    let default_ckpt = || root.join("train").join("model.ckpt");
    match &cli.command {
        Command::Synth(c) => commands::synth(&loaded, &out, c.force),
        Command::Stats(c) => commands::stats(&loaded, &out, c.force),
        Command::Train(c) => commands::train(&loaded, &out, c.force),
        Command::Eval { checkpoint, .. } => {
            commands::eval(&loaded, &out, &checkpoint.clone().unwrap_or_else(default_ckpt))
        }
        Command::Rank { k, tap, .. } => commands::rank(&loaded, &out, *k, *tap),
        Command::Predict { checkpoint, input, .. } => {
            commands::predict(&loaded, &out, &checkpoint.clone().unwrap_or_else(default_ckpt), input)
        }
        Command::Ablate(_) => Ok(ablate::ablate(&loaded, &out)?.to_markdown()),
    }
}

/// Parses arguments, runs the command, prints the summary or error, and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            println!("{}", summary.trim_end());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
