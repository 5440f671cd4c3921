use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use creasenet::pipeline::{Outcome, Run, RunConfig, CONFIG_ENV};
use creasenet::{par, Result};

/// Forehead-crease verification: synthetic data, montage cubes, two-stage
/// training, embedding and gallery/probe evaluation.
#[derive(Debug, Parser)]
#[command(name = "creasenet", version)]
struct Cli {
    /// Config file (TOML). Falls back to the file named by the environment variable.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,

    /// Run directory; every output and the run manifest live here.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Override one config key, e.g. `--set triplet.margin=0.3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Run single-threaded.
    #[arg(long, global = true)]
    sequential: bool,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic image tree into <out>/synth.
    Synth,
    /// Build montage cubes from the data tree, or from one image with --input.
    Preprocess {
        /// A single ROI image instead of the configured data tree.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Montage preset (overrides montage.preset).
        #[arg(long)]
        preset: Option<String>,
    },
    /// Stage 1: triplet training of the backbone.
    TrainBackbone,
    /// Stage 2: head and angular-margin classifier training.
    TrainHead,
    /// Write one embedding per cube to <out>/embeddings.csv.
    Embed,
    /// Score the gallery/probe protocol and write metrics, or score an existing file with --scores.
    Evaluate {
        /// A `pair_type,gallery_id,probe_id,score` file to evaluate directly.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Every stage in order: synth (when no data root is set) through evaluate.
    Run,
    /// Print the resolved configuration as TOML.
    Config,
}

fn keys_help() -> String {
    let keys = RunConfig::documented_keys();
    let width = keys.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (set in the file or with --set KEY=VALUE; default shown):\n");
    for (k, v) in keys {
        s.push_str(&format!("  {k:width$}  {v}\n"));
    }
    s.push_str(&format!(
        "\nPrecedence: --set and command flags > config file (--config or ${CONFIG_ENV}) > defaults.\n\
         Exit status: 0 success, 1 invalid input or configuration, 2 runtime failure."
    ));
    s
}

fn report(stage: &str, o: Outcome) {
    match o {
        Outcome::Ran => println!("{stage}: done"),
        Outcome::Skipped => println!("{stage}: up to date"),
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut overrides = cli.overrides.clone();
    if let Command::Preprocess { preset: Some(p), .. } = &cli.command {
        overrides.push(format!("montage.preset=\"{p}\""));
    }
    let config = RunConfig::resolve(cli.config.as_deref(), &overrides)?;
    if let Command::Config = cli.command {
        print!("{}", config.to_toml()?);
        return Ok(());
    }
    let run = Run::new(&cli.out, config)?;
    match cli.command {
        Command::Synth => report("synth", run.synth()?),
        Command::Preprocess { input: Some(image), .. } => {
            let path = run.preprocess_image(&image)?;
            println!("{}", path.display());
        }
        Command::Preprocess { input: None, .. } => report("preprocess", run.preprocess()?),
        Command::TrainBackbone => report("train-backbone", run.train_backbone()?),
        Command::TrainHead => report("train-head", run.train_head()?),
        Command::Embed => report("embed", run.embed()?),
        Command::Evaluate { scores: Some(path) } => {
            print!("{}", run.evaluate_scores(&path)?.to_toml()?);
        }
        Command::Evaluate { scores: None } => {
            let (o, metrics) = run.evaluate()?;
            report("evaluate", o);
            print!("{}", metrics.to_toml()?);
        }
        Command::Run => {
            if run.config.data.root.as_os_str().is_empty() {
                report("synth", run.synth()?);
            }
            report("preprocess", run.preprocess()?);
            report("train-backbone", run.train_backbone()?);
            report("train-head", run.train_head()?);
            report("embed", run.embed()?);
            let (o, metrics) = run.evaluate()?;
            report("evaluate", o);
            print!("{}", metrics.to_toml()?);
        }
        Command::Config => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let command = Cli::command().after_help(keys_help());
    let cli = match command.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if cli.sequential {
        par::set_enabled(false);
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

