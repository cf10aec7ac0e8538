mod commands;
mod plot;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use vsmd::config::RunConfig;
use vsmd::samplers::SamplerKind;

use commands::{EvalArgs, SampleArgs};

#[derive(Parser)]
#[command(name = "vsmd", version = rundir::VERSION, about = "Variational momentum diffusion experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted `key=value` applied on top of the config file.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset to data.csv.
    GenData,
    /// Train the score network and, for variational modes, the schedule.
    Train {
        /// Continue from checkpoint.json in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Draw samples from a trained model.
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// em, aboba, ode_euler or ode_heun; overrides sampler.kind.
        #[arg(long)]
        sampler: Option<SamplerKind>,
        #[arg(long)]
        n: Option<usize>,
        /// Also write every intermediate state to trajectory.csv.
        #[arg(long)]
        trajectory: bool,
    },
    /// Compare samples against reference data.
    Eval {
        #[arg(long)]
        samples: Option<PathBuf>,
        /// CSV with x0.. columns; defaults to a fresh draw from the data source.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Probabilistic forecasts and CRPS-sum on the held-out series tail.
    Forecast {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate over the cartesian product of override grids.
    Sweep {
        /// `key=v1,v2,...`; repeat for more axes.
        #[arg(long = "grid", value_name = "KEY=V1,V2", required = true)]
        grids: Vec<String>,
    },
}

fn load_config(common: &Common, extra: &[String]) -> Result<RunConfig> {
    let text = match &common.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(vsmd::Error::Io)
            .with_context(|| format!("reading {}", path.display()))?,
        None => String::new(),
    };
    let mut overrides = common.overrides.clone();
    overrides.extend_from_slice(extra);
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    let mut cfg = RunConfig::from_toml_with_overrides(&text, &overrides)?;
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::GenData => commands::gen_data(&load_config(common, &[])?),
        Command::Train { resume } => commands::train(&load_config(common, &[])?, resume).map(drop),
        Command::Sample { checkpoint, sampler, n, trajectory } => commands::sample_cmd(
            &load_config(common, &[])?,
            &SampleArgs { checkpoint, kind: sampler, n, trajectory },
        ),
        Command::Eval { samples, reference } => {
            commands::eval(&load_config(common, &[])?, &EvalArgs { samples, reference }).map(drop)
        }
        Command::Forecast { checkpoint } => commands::forecast(&load_config(common, &[])?, checkpoint.as_deref()).map(drop),
        Command::Sweep { grids } => {
            let base = load_config(common, &[])?;
            let grids = grids.iter().map(|g| commands::parse_grid(g)).collect::<Result<Vec<_>>>()?;
            let combos = commands::cartesian(&grids);
            // Validate every grid point before any training starts.
            for combo in &combos {
                load_config(common, combo)?;
            }
            commands::sweep(&base, &combos, |combo| load_config(common, combo))
        }
    }
}

/// 2 configuration or usage, 3 numerical failure, 4 I/O.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<vsmd::Error>() {
            return match e {
                vsmd::Error::Io(_) => 4,
                vsmd::Error::Config(_) | vsmd::Error::InvalidArgument(_) | vsmd::Error::Checkpoint(_) => 2,
                _ => 3,
            };
        }
        if cause.is::<std::io::Error>() {
            return 4;
        }
        if let Some(e) = cause.downcast_ref::<csv::Error>() {
            return if e.is_io_error() { 4 } else { 2 };
        }
        if cause.is::<serde_json::Error>() {
            return 4;
        }
    }
    2
}

/// Context chain joined with `: `, dropping causes already quoted by the
/// message above them.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !prev.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
        prev = text;
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
