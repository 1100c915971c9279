//! Command-line front end: `run`, `sweep`, `theory`, `selftest`.

pub mod output;
pub mod selftest;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::engine::{self, NoObserver, RunOptions};
use crate::error::Error;
use crate::theory::TheoryGrid;

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success = 0,
    ConfigError = 1,
    RuntimeError = 2,
    AcceptanceFailure = 3,
}

impl From<Status> for ExitCode {
    fn from(s: Status) -> Self {
        ExitCode::from(s as u8)
    }
}

/// A failure with the exit status it maps to.
#[derive(Debug)]
pub struct CliError {
    pub status: Status,
    pub message: String,
}

impl CliError {
    fn config(e: impl std::fmt::Display) -> Self {
        Self {
            status: Status::ConfigError,
            message: format!("config error: {e}"),
        }
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        Self {
            status: Status::RuntimeError,
            message: format!("error: {e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) => Self::config(e),
            other => Self::runtime(other),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "fedarena",
    version,
    about = "Federated learning membership-inference simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one experiment per value of a config key.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// `dotted.key=v1,v2,...`
        #[arg(long)]
        sweep: String,
    },
    /// Check the deviation bound over a parameter grid.
    Theory {
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV output path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the built-in property checks.
    Selftest {
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn read_table(path: Option<&Path>) -> Result<toml::Table, CliError> {
    let Some(path) = path else {
        return Ok(toml::Table::new());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    text.parse::<toml::Table>()
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn config_from_table(table: toml::Table) -> Result<ExperimentConfig, CliError> {
    let config: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::config(e.message()))?;
    config.validate().map_err(CliError::config)?;
    Ok(config)
}

/// Reads and validates an experiment config; missing keys take defaults
/// and unknown keys are rejected.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    config_from_table(read_table(Some(path))?)
}

/// Parses a config from TOML text.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, CliError> {
    let table = text.parse::<toml::Table>().map_err(CliError::config)?;
    config_from_table(table)
}

fn with_seed(mut config: ExperimentConfig, seed: Option<u64>) -> ExperimentConfig {
    if let Some(s) = seed {
        config.seed = s;
    }
    config
}

/// Runs `config` and writes its artifacts into `out`.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<engine::ExperimentResult, CliError> {
    let result = engine::run(config, RunOptions::from_env(), &mut NoObserver)?;
    output::write_run(out, config, &result)?;
    Ok(result)
}

fn parse_scalar(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| CliError::config("sweep: empty key"))?;
    let mut cursor = table;
    for p in parts {
        let entry = cursor
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("sweep: {key}: {p} is not a table")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

/// Splits `key=v1,v2` into the key and its raw values.
pub fn parse_sweep(arg: &str) -> Result<(String, Vec<String>), CliError> {
    let (key, values) = arg
        .split_once('=')
        .ok_or_else(|| CliError::config("sweep: expected key=v1,v2,..."))?;
    let values: Vec<String> = values
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if key.trim().is_empty() || values.is_empty() {
        return Err(CliError::config("sweep: expected key=v1,v2,..."));
    }
    Ok((key.trim().to_string(), values))
}

fn sweep(config: Option<&Path>, out: &Path, seed: Option<u64>, arg: &str) -> Result<(), CliError> {
    let (key, values) = parse_sweep(arg)?;
    let base = read_table(config)?;
    let mut configs = Vec::with_capacity(values.len());
    for v in &values {
        let mut table = base.clone();
        set_dotted(&mut table, &key, parse_scalar(v))?;
        configs.push(with_seed(config_from_table(table)?, seed));
    }
    let mut rows = format!("{key},attack_accuracy,precision,recall,final_test_acc\n");
    for (v, c) in values.iter().zip(&configs) {
        let dir = out.join(format!("{key}={v}"));
        let r = run_experiment(c, &dir)?;
        let s = output::Summary::of(&r);
        rows.push_str(&format!(
            "{v},{},{},{},{}\n",
            output::fmt_sig(s.attack_accuracy),
            output::fmt_sig(s.precision),
            output::fmt_sig(s.recall),
            output::fmt_sig(s.final_test_acc)
        ));
    }
    output::write_file(&out.join("sweep.csv"), rows.as_bytes())?;
    Ok(())
}

/// Parses a theory grid; missing keys take the default grid.
pub fn parse_grid(path: Option<&Path>) -> Result<TheoryGrid, CliError> {
    let grid: TheoryGrid = toml::Value::Table(read_table(path)?)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::config(e.message()))?;
    grid.validate().map_err(CliError::config)?;
    Ok(grid)
}

/// Writes the bound table to `out`; fails with `AcceptanceFailure` if any
/// grid point exceeds its bound.
pub fn run_theory_suite(grid: &TheoryGrid, out: &Path) -> Result<(), CliError> {
    let rows = grid.run()?;
    if rows.is_empty() {
        eprintln!("warning: theory grid has no valid points");
    }
    let mut csv = String::from("n,m,b,sigma2,adversary,trials,empirical,bound,pass,one_sided_empirical\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.n,
            r.m,
            r.b,
            output::fmt_sig(r.sigma2),
            r.adversary.name(),
            r.trials,
            output::fmt_sig(r.empirical),
            output::fmt_sig(r.bound),
            r.pass,
            output::fmt_sig(r.one_sided_empirical)
        ));
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
    }
    output::write_file(out, csv.as_bytes())?;
    let failing: Vec<String> = rows
        .iter()
        .filter(|r| !r.pass)
        .map(|r| format!("n={} m={} b={} adversary={}", r.n, r.m, r.b, r.adversary.name()))
        .collect();
    if failing.is_empty() {
        Ok(())
    } else {
        Err(CliError {
            status: Status::AcceptanceFailure,
            message: format!("bound exceeded at: {}", failing.join("; ")),
        })
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let config = with_seed(config_from_table(read_table(config.as_deref())?)?, seed);
            run_experiment(&config, &out).map(|_| ())
        }
        Command::Sweep {
            config,
            out,
            seed,
            sweep: arg,
        } => sweep(config.as_deref(), &out, seed, &arg),
        Command::Theory { config, out, seed } => {
            let mut grid = parse_grid(config.as_deref())?;
            if let Some(s) = seed {
                grid.seed = s;
            }
            run_theory_suite(&grid, &out)
        }
        Command::Selftest { seed } => {
            let report = selftest::run(seed.unwrap_or(0));
            for line in &report {
                println!("{line}");
            }
            if report.iter().all(|l| l.passed) {
                Ok(())
            } else {
                Err(CliError {
                    status: Status::AcceptanceFailure,
                    message: "selftest failed".into(),
                })
            }
        }
    }
}

/// Entry point shared by the binary and tests.
pub fn main_from<I, T>(args: I) -> Status
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                Status::ConfigError
            } else {
                Status::Success
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => Status::Success,
        Err(e) => {
            eprintln!("{}", e.message);
            e.status
        }
    }
}
