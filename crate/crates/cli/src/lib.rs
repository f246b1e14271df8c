//! Command-line driver: configuration ingestion, dispatch and serialization.
//!
//! Exit codes: 0 success, 2 admissibility or validation failure, 3 config or
//! expression error, 4 numerical failure, 5 I/O error.

pub mod commands;
pub mod config;
pub mod format;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use config::{LoadError, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Config(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Io { .. } => 5,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "regsing", version, about = "Solvers for regular-singular ODE problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Harmonic map equation of a cohomogeneity-one metric family.
    SolveHarmonic(Common),
    /// Biharmonic system of a diagonal metric family.
    SolveBiharmonic(Common),
    /// General singular initial value problem given by expressions.
    SolveSingular(Common),
    /// Monodromy matrix of a linear regular-singular system.
    Monodromy(Common),
    /// Fundamental solution on the logarithmic cover.
    Fundamental(Common),
    /// Admissibility report without solving.
    Check(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output path: CSV here, JSON summary next to it with extension `.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `tolerance`.
    #[arg(long)]
    tol: Option<f64>,
    /// Overrides `series_order`.
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::SolveHarmonic(c) => ("harmonic", c),
            Command::SolveBiharmonic(c) => ("biharmonic", c),
            Command::SolveSingular(c) => ("singular", c),
            Command::Monodromy(c) => ("monodromy", c),
            Command::Fundamental(c) => ("fundamental", c),
            Command::Check(c) => ("check", c),
        }
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (_, common) = cli.command.parts();
    let quiet = common.quiet;
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            if !quiet {
                eprintln!("error: {e}");
            }
            e.exit_code()
        }
    }
}

fn execute(command: &Command) -> Result<(), CliError> {
    let (problem, common) = command.parts();
    let mut cfg = RunConfig::load(&common.config).map_err(|e| match e {
        LoadError::Io(source) => CliError::Io { path: common.config.display().to_string(), source },
        LoadError::Parse(msg) => CliError::Config(msg),
    })?;
    if let Some(p) = &cfg.problem {
        if p != problem {
            return Err(CliError::Config(format!("config is for problem '{p}' but the command runs '{problem}'")));
        }
    }
    if let Some(tol) = common.tol {
        cfg.tolerance = Some(tol);
    }
    if let Some(order) = common.order {
        cfg.series_order = Some(order);
    }
    let tol = cfg.tol();
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(CliError::Config(format!("tolerance must be positive, got {tol}")));
    }
    let result = match command {
        Command::SolveHarmonic(_) => commands::solve_harmonic(&cfg),
        Command::SolveBiharmonic(_) => commands::solve_biharmonic(&cfg),
        Command::SolveSingular(_) => commands::solve_singular(&cfg),
        Command::Monodromy(_) => commands::monodromy(&cfg),
        Command::Fundamental(_) => commands::fundamental(&cfg),
        Command::Check(_) => commands::check(&cfg),
    };
    let out = common.out.clone().or_else(|| cfg.output.as_ref().map(PathBuf::from));
    let output = match result {
        Ok(output) => output,
        Err(e) => {
            if let (Some(path), CliError::Validation(_) | CliError::Numerical(_)) = (&out, &e) {
                let body = serde_json::json!({
                    "command": problem,
                    "config": cfg,
                    "error": e.to_string(),
                    "exit_code": e.exit_code(),
                });
                write_file(&path.with_extension("json"), &(serde_json::to_string_pretty(&body).expect("json") + "\n"))?;
            }
            return Err(e);
        }
    };
    let summary = serde_json::to_string_pretty(&output.summary).expect("summary serializes") + "\n";
    match out {
        Some(path) => {
            if let Some(body) = &output.csv {
                write_file(&path, body)?;
            }
            write_file(&path.with_extension("json"), &summary)?;
        }
        None => {
            let text = output.csv.as_deref().unwrap_or(&summary);
            std::io::stdout()
                .write_all(text.as_bytes())
                .map_err(|source| CliError::Io { path: "<stdout>".into(), source })?;
        }
    }
    if !common.quiet && output.failure.is_none() {
        if let Some(m) = output.summary.get("max_residual").and_then(|v| v.as_f64()) {
            eprintln!("done: max residual {m:e}");
        }
    }
    match output.failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn write_file(path: &Path, body: &str) -> Result<(), CliError> {
    std::fs::write(path, body).map_err(|source| CliError::Io { path: path.display().to_string(), source })
}
