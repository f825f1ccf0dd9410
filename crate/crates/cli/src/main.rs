//! `favae` command-line front end.
//!
//! Exit codes: 0 success, 2 invalid input, 3 I/O failure, 4 numerical or
//! training failure.

mod commands;
mod config;
mod error;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use toml::{Table, Value};

use config::{env_overrides, read_table, resolve, Override, Resolved, RESOLVED_FILE};
use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "favae",
    version,
    about = "Multi-view VAEs tied by a factor-analysis latent space"
)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed (overrides the config file and FAVAE_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true)]
    log_level: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Space {
    Private,
    Global,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset manifest (overrides `data.manifest`).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Total outer-iteration cap (overrides `train.max_outer_iters`).
    #[arg(long)]
    max_outer_iters: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset described by a spec file.
    Synth { spec: PathBuf },
    /// Train a model and write a checkpoint, trace and plots.
    Train {
        #[command(flatten)]
        args: TrainArgs,
        /// Continue the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Continue a run; the config defaults to the run's resolved config.
    Resume {
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Sample a view given evidence from other views.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// TOML request with `target`, `given`, `n_samples` and `seed`.
        #[arg(long)]
        request: PathBuf,
    },
    /// Translate observations of one view into another.
    Cross {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
        /// Matrix file of observations of the source view.
        #[arg(long)]
        input: PathBuf,
    },
    /// Decode a straight path between two observations.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        space: Space,
        #[arg(long)]
        view: String,
        /// Matrix file with two rows of observations of `--view`.
        #[arg(long)]
        endpoints: PathBuf,
        #[arg(long, default_value_t = 8)]
        steps: usize,
    },
    /// Factor relevance report and heat map.
    Relevance {
        #[arg(long)]
        checkpoint: PathBuf,
        /// abs_mean or signed_mean.
        #[arg(long, default_value = "abs_mean")]
        mode: String,
        /// View whose scores order the factors.
        #[arg(long)]
        reference: Option<String>,
    },
    /// Print a summary of a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn key(path: &str) -> Vec<String> {
    path.split('.').map(str::to_string).collect()
}

fn integer(name: &str, v: u64) -> CliResult<Value> {
    i64::try_from(v)
        .map(Value::Integer)
        .map_err(|_| CliError::invalid(format!("{name}: {v} does not fit a signed 64-bit integer")))
}

fn path_value(p: &std::path::Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

fn global_flags(cli: &Cli) -> CliResult<Vec<Override>> {
    let mut flags = Vec::new();
    if let Some(s) = cli.seed {
        flags.push((key("seed"), integer("--seed", s)?));
    }
    if let Some(o) = &cli.out {
        flags.push((key("out"), path_value(o)));
    }
    if let Some(l) = &cli.log_level {
        flags.push((key("log_level"), Value::String(l.clone())));
    }
    Ok(flags)
}

fn train_flags(args: &TrainArgs, flags: &mut Vec<Override>) -> CliResult<()> {
    if let Some(m) = &args.manifest {
        flags.push((key("data.manifest"), path_value(m)));
    }
    if let Some(n) = args.max_outer_iters {
        flags.push((
            key("train.max_outer_iters"),
            integer("--max-outer-iters", n as u64)?,
        ));
    }
    Ok(())
}

fn init_logging(level: &str) {
    let filter = level.parse().unwrap_or(log::LevelFilter::Info);
    let _ = env_logger::Builder::new()
        .filter_level(filter)
        .format_timestamp(None)
        .try_init();
}

fn run(cli: Cli) -> CliResult<()> {
    let mut flags = global_flags(&cli)?;
    let base_file = match (&cli.command, &cli.config) {
        (_, Some(c)) => Some(c.clone()),
        (Command::Resume { .. }, None) => {
            let out = cli
                .out
                .clone()
                .ok_or_else(|| CliError::invalid("out: resume needs the run directory (--out)"))?;
            Some(out.join(RESOLVED_FILE))
        }
        _ => None,
    };
    match &cli.command {
        Command::Train { args, .. } | Command::Resume { args } => train_flags(args, &mut flags)?,
        _ => {}
    }
    let base = match &base_file {
        Some(p) => read_table(p)?,
        None => Table::new(),
    };
    let resolved: Resolved = resolve(base, env_overrides(std::env::vars()), flags)?;
    init_logging(&resolved.config.log_level);
    match cli.command {
        Command::Synth { spec } => commands::synth(&resolved, &spec),
        Command::Train { resume, .. } => commands::train(&resolved, resume),
        Command::Resume { .. } => commands::train(&resolved, true),
        Command::Generate {
            checkpoint,
            request,
        } => commands::generate(&resolved, &checkpoint, &request),
        Command::Cross {
            checkpoint,
            from,
            to,
            input,
        } => commands::cross(&resolved, &checkpoint, &from, &to, &input),
        Command::Interpolate {
            checkpoint,
            space,
            view,
            endpoints,
            steps,
        } => commands::interpolate(&resolved, &checkpoint, space, &view, &endpoints, steps),
        Command::Relevance {
            checkpoint,
            mode,
            reference,
        } => commands::relevance(&resolved, &checkpoint, &mode, reference.as_deref()),
        Command::Inspect { checkpoint } => commands::inspect(&checkpoint),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("favae: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
