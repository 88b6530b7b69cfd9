//! Experiment runner behind the `codream` binary.

pub mod config;
pub mod report;

use std::path::{Path, PathBuf};

use codream::orchestrator::{run_baseline, Method};
use rayon::prelude::*;

use config::{ConfigError, ExperimentConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Numeric(String),
    Other(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Numeric(_) => EXIT_NUMERIC,
            Failure::Other(_) => EXIT_FAILURE,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Numeric(m) | Failure::Other(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

impl From<codream::Error> for Failure {
    fn from(e: codream::Error) -> Self {
        use codream::Error as E;
        if e.is_numeric() {
            return Failure::Numeric(e.to_string());
        }
        match e {
            E::Invalid(_) | E::Contract(_) | E::Parse { .. } => Failure::Config(e.to_string()),
            other => Failure::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

pub fn metrics_path(out: &Path, method: Method, seed: u64) -> PathBuf {
    out.join(format!("{}-seed{seed}.jsonl", method.name()))
}

/// Runs `method` once per seed, writing one metrics file per run.
pub fn run_experiment(cfg: &ExperimentConfig, method: Method, seeds: &[u64], out: &Path) -> Result<Vec<PathBuf>, Failure> {
    let scenario = cfg.scenario()?;
    std::fs::create_dir_all(out)?;
    seeds
        .par_iter()
        .map(|&seed| {
            let record = run_baseline(method, &scenario, seed)?;
            let path = metrics_path(out, method, seed);
            let file = std::fs::File::create(&path)?;
            record.write_jsonl(std::io::BufWriter::new(file))?;
            Ok(path)
        })
        .collect()
}

/// Writes `summary.csv` and `comm.csv` for every metrics file in `dir`.
pub fn write_report(dir: &Path) -> Result<(String, String), Failure> {
    if !dir.is_dir() {
        return Err(Failure::Config(format!("{}: not a directory", dir.display())));
    }
    let records = report::load_records(dir)?;
    if records.is_empty() {
        return Err(Failure::Config(format!("{}: no metrics files", dir.display())));
    }
    let summary = report::summary_csv(&report::summarize(&records));
    let comm = report::comm_csv(&records);
    std::fs::write(dir.join("summary.csv"), &summary)?;
    std::fs::write(dir.join("comm.csv"), &comm)?;
    Ok((summary, comm))
}

/// Runs the invariant suite; returns the printable report and overall status.
pub fn selftest(inject_adv_sign_flip: bool) -> (String, bool) {
    codream::extraction::inject_adv_sign_flip(inject_adv_sign_flip);
    let checks = codream::selftest::run_selftest();
    codream::extraction::inject_adv_sign_flip(false);
    let mut text = String::new();
    let mut ok = true;
    for c in &checks {
        ok &= c.passed;
        let status = if c.passed { "PASS" } else { "FAIL" };
        text.push_str(&format!("{status} {}: {}\n", c.name, c.detail));
    }
    if !ok {
        let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
        text.push_str(&format!("failed: {}\n", failed.join(", ")));
    }
    (text, ok)
}
