//! `codim2`: analyze, plot and simulate piecewise-smooth systems with a
//! codimension-2 discontinuity set.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for numerical
//! failures. Errors are printed to stderr as JSON.

mod commands;
mod config;
mod error;
mod portrait;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;

use config::Config;
use error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Svg,
}

/// One output file of a command.
pub struct Artifact {
    pub file: String,
    pub format: Format,
    pub body: String,
}

impl Artifact {
    pub fn new(file: &str, format: Format, body: String) -> Self {
        Self { file: file.to_string(), format, body }
    }
}

#[derive(Parser)]
#[command(name = "codim2", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration file.
    #[arg(long, global = true, conflicts_with = "scenario")]
    config: Option<PathBuf>,
    /// Start from a built-in scenario instead of a file.
    #[arg(long, global = true)]
    scenario: Option<String>,
    /// Override a config value, e.g. `--set system.params.mu=0.5` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Write every output file into this directory instead of printing one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Which output to print when `--out` is not given.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Seed for randomized sampling (portrait streamlines, psi checks).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Limit directions, critical points, slow flow and portrait label at `z`.
    Analyze,
    /// SVG phase portrait of the layer problem at `z`.
    Portrait,
    /// Integrate a trajectory.
    Simulate,
    /// Locate bifurcations along a path.
    Sweep,
    /// List built-in scenarios, or print one as a config with `--scenario`.
    Scenarios,
    /// Check a regularization function against the map's structural properties.
    ValidatePsi,
}

fn load(cli: &Cli) -> Result<Config, CliError> {
    let mut doc = match (&cli.config, &cli.scenario) {
        (Some(path), _) => config::read_value(path)?,
        (None, Some(name)) => config::scenario_value(name)?,
        (None, None) => Value::Object(Default::default()),
    };
    for o in &cli.overrides {
        config::apply_override(&mut doc, o)?;
    }
    Config::from_value(doc)
}

fn emit(cli: &Cli, cfg_dir: Option<PathBuf>, artifacts: &[Artifact]) -> Result<(), CliError> {
    if let Some(dir) = cli.out.clone().or(cfg_dir) {
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::config("/outputs/dir", format!("{}: {e}", dir.display())))?;
        for a in artifacts {
            let path = dir.join(&a.file);
            std::fs::write(&path, &a.body)
                .map_err(|e| CliError::config("/outputs/dir", format!("{}: {e}", path.display())))?;
            log::info!("wrote {}", path.display());
        }
        return Ok(());
    }
    let chosen = match cli.format {
        None => artifacts.first(),
        Some(f) => artifacts.iter().find(|a| a.format == f),
    };
    let a = chosen.ok_or_else(|| {
        let have: Vec<_> = artifacts.iter().map(|a| format!("{:?}", a.format).to_lowercase()).collect();
        CliError::config("", format!("format not available here (have: {})", have.join(", ")))
    })?;
    let mut stdout = std::io::stdout().lock();
    stdout
        .write_all(a.body.as_bytes())
        .and_then(|_| stdout.flush())
        .map_err(|e| CliError::Numeric(format!("stdout: {e}")))
}

fn run(cli: &Cli) -> Result<bool, CliError> {
    if let Command::Scenarios = cli.command {
        let artifacts = commands::scenarios_cmd(cli.scenario.as_deref())?;
        emit(cli, None, &artifacts)?;
        return Ok(true);
    }
    let cfg = load(cli)?;
    let dir = cfg.outputs.dir.clone();
    let mut ok = true;
    let artifacts = match cli.command {
        Command::Analyze => commands::analyze(&cfg)?,
        Command::Portrait => commands::portrait_cmd(&cfg, cli.seed)?,
        Command::Simulate => commands::simulate(&cfg)?,
        Command::Sweep => commands::sweep_cmd(&cfg)?,
        Command::ValidatePsi => {
            let (a, passed) = commands::validate_psi_cmd(&cfg, cli.seed)?;
            ok = passed;
            a
        }
        Command::Scenarios => unreachable!(),
    };
    emit(cli, dir, &artifacts)?;
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let err = CliError::config("", e.render().to_string().trim_end());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            let err = CliError::Numeric("regularization failed its property checks".into());
            eprintln!("{}", err.to_json());
            ExitCode::from(err.exit_code() as u8)
        }
        Err(err) => {
            eprintln!("{}", err.to_json());
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
