use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use coopdyn_cli::config::{Command, Format, KEY_REFERENCE};
use coopdyn_cli::{parse_config_with, run_experiment, Overrides, RunError};

/// Top Lyapunov exponents of cooperative linear systems in ergodic
/// environments.
#[derive(Debug, Parser)]
#[command(name = "coopdyn", version, after_long_help = KEY_REFERENCE)]
struct Cli {
    /// estimate | periodic-exact | floquet | bounds | sweep | contraction | concentration
    #[arg(value_parser = parse_command)]
    command: Command,

    /// TOML experiment config
    #[arg(long)]
    config: PathBuf,

    /// Overrides `seed`
    #[arg(long)]
    seed: Option<u64>,

    /// Overrides `output.path`
    #[arg(long)]
    output: Option<PathBuf>,

    /// Overrides `output.format`
    #[arg(long, value_parser = parse_format)]
    format: Option<Format>,
}

fn parse_command(s: &str) -> Result<Command, String> {
    Command::from_name(s).ok_or_else(|| format!("unknown command {s:?}"))
}

fn parse_format(s: &str) -> Result<Format, String> {
    Format::from_name(s).ok_or_else(|| format!("expected csv or json, got {s:?}"))
}

fn run(cli: Cli) -> Result<(), RunError> {
    let text = std::fs::read_to_string(&cli.config).map_err(|e| RunError::io(&cli.config, e))?;
    let overrides = Overrides {
        command: Some(cli.command),
        seed: cli.seed,
        output: cli.output,
        format: cli.format,
    };
    let cfg = parse_config_with(&text, &overrides)?;
    log::info!("running {} with seed {}", cfg.command, cfg.seed);
    run_experiment(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
