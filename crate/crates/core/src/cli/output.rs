//! Result files: `rounds.csv`, `membership.csv`, `summary.json`,
//! `manifest.json` and a `config.toml` snapshot.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::engine::ExperimentResult;
use crate::error::{Error, Result};

/// Rounds `x` to 9 significant digits.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

/// `x` at 9 significant digits in shortest decimal form.
pub fn fmt_sig(x: f64) -> String {
    format!("{}", round_sig(x))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

pub(crate) fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub attack_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub final_test_acc: f64,
    pub best_round: usize,
}

impl Summary {
    pub fn of(result: &ExperimentResult) -> Self {
        Self {
            attack_accuracy: round_sig(result.attack_accuracy),
            precision: round_sig(result.attack_precision),
            recall: round_sig(result.attack_recall),
            final_test_acc: round_sig(result.final_test_accuracy),
            best_round: result.records[result.best_round].round,
        }
    }
}

/// Reproduction record written next to every result.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest<'a> {
    pub artifact: &'static str,
    pub version: &'static str,
    pub seed: u64,
    pub config: &'a ExperimentConfig,
    pub outputs: Vec<String>,
}

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const MEMBERSHIP_FILE: &str = "membership.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

pub fn rounds_csv(result: &ExperimentResult) -> String {
    let mut out = String::from("round,test_acc,mem_correct,mem_total,kept_count\n");
    for r in &result.records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.round,
            fmt_sig(r.test_accuracy),
            r.membership_correct,
            r.predictions.len(),
            r.kept_count()
        ));
    }
    out
}

pub fn membership_csv(result: &ExperimentResult) -> String {
    let mut out = String::from("round,sample,predicted,member\n");
    for r in &result.records {
        for (i, (&p, &t)) in r.predictions.iter().zip(&result.truth).enumerate() {
            out.push_str(&format!("{},{},{},{}\n", r.round, i, u8::from(p), u8::from(t)));
        }
    }
    out
}

pub fn summary_json(result: &ExperimentResult) -> String {
    let mut s = serde_json::to_string_pretty(&Summary::of(result)).expect("summary serializes");
    s.push('\n');
    s
}

/// Writes every artifact of one run into `dir`, creating it if needed.
pub fn write_run(dir: &Path, config: &ExperimentConfig, result: &ExperimentResult) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let files = [
        (ROUNDS_FILE, rounds_csv(result)),
        (MEMBERSHIP_FILE, membership_csv(result)),
        (SUMMARY_FILE, summary_json(result)),
        (CONFIG_FILE, toml::to_string(config).map_err(|e| io_err(dir, e))?),
    ];
    let mut written = Vec::new();
    for (name, body) in &files {
        let path = dir.join(name);
        write_file(&path, body.as_bytes())?;
        written.push(path);
    }
    let manifest = RunManifest {
        artifact: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        seed: config.seed,
        config,
        outputs: files.iter().map(|(n, _)| n.to_string()).collect(),
    };
    let path = dir.join(MANIFEST_FILE);
    let mut body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    body.push('\n');
    write_file(&path, body.as_bytes())?;
    written.push(path);
    Ok(written)
}
