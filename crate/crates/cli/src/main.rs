use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

#[derive(Parser)]
#[command(name = "mmsi", version, about = "Guilt and sentencing experiments on multidefendant cases")]
struct Cli {
    /// More logging (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory, replacing `output_dir`.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus.
    Generate(Common),
    /// Write masked, constructed sample sets and vocabularies per resample.
    Preprocess(Common),
    /// Train every (resample, repetition) run; finished runs are skipped.
    Train(Common),
    /// Pool run metrics with confidence intervals.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Score a prediction file instead of the protocol runs.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Integrated gradients, comprehensiveness, token frequencies, attention.
    Attribute(Common),
    /// Train and evaluate each point of the configured grid.
    Sweep(Common),
    /// Summary tables and scatter data from earlier outputs.
    Report(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    let (common, predictions) = match &cli.command {
        Command::Evaluate { common, predictions } => (common, predictions.as_deref()),
        Command::Generate(c)
        | Command::Preprocess(c)
        | Command::Train(c)
        | Command::Attribute(c)
        | Command::Sweep(c)
        | Command::Report(c) => (c, None),
    };
    let cfg = match config::load(&common.config, &common.overrides, common.out.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let result = commands::prepare_output(&cfg).and_then(|()| match &cli.command {
        Command::Generate(_) => commands::generate(&cfg),
        Command::Preprocess(_) => commands::preprocess(&cfg),
        Command::Train(_) => commands::train(&cfg),
        Command::Evaluate { .. } => commands::evaluate(&cfg, predictions),
        Command::Attribute(_) => commands::attribute(&cfg),
        Command::Sweep(_) => commands::sweep(&cfg),
        Command::Report(_) => commands::report(&cfg),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(mmsi::Error::Config(m)) => {
            eprintln!("error: {}: {m}", common.config.display());
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
