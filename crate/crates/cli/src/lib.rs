//! Experiment driver behind the `relaxctl` binary.
//!
//! [`run`] reads a JSON configuration, runs one command and writes its
//! artifacts plus `report.json` (deterministic) and `meta.json` (timestamp,
//! wall time) into the output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::ValueEnum;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub mod commands;
pub mod config;

pub use config::Config;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] relaxctl::model::ModelError),
    #[error(transparent)]
    Dpp(#[from] relaxctl::dpp::DppError),
    #[error(transparent)]
    Sim(#[from] relaxctl::simulate::SimError),
    #[error(transparent)]
    Relaxed(#[from] relaxctl::relaxed::RelaxedError),
    #[error(transparent)]
    Mart(#[from] relaxctl::martcheck::MartError),
    #[error(transparent)]
    Selection(#[from] relaxctl::selection::SelectionError),
    #[error(transparent)]
    Oracle(#[from] relaxctl::oracle::OracleError),
}

impl CliError {
    /// 2 for configuration problems, 3 for failures while computing.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Solve,
    Simulate,
    Chatter,
    Martcheck,
    Select,
    Compare,
    Oracle,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Simulate => "simulate",
            Command::Chatter => "chatter",
            Command::Martcheck => "martcheck",
            Command::Select => "select",
            Command::Compare => "compare",
            Command::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub config: PathBuf,
    pub out: PathBuf,
    /// Overrides the configured seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    /// True when every contract of the command holds.
    pub pass: bool,
    pub report: Value,
    /// Files written, relative to the output directory.
    pub files: Vec<String>,
}

/// Named pass/fail checks collected by a command.
#[derive(Debug, Default)]
pub struct Contracts(Vec<(String, bool)>);

impl Contracts {
    pub fn check(&mut self, name: &str, ok: bool) {
        self.0.push((name.to_string(), ok));
    }

    pub fn all(&self) -> bool {
        self.0.iter().all(|(_, ok)| *ok)
    }

    fn to_json(&self) -> Value {
        Value::Object(self.0.iter().map(|(k, v)| (k.clone(), Value::Bool(*v))).collect())
    }
}

pub(crate) fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|source| CliError::Io { path, source })
}

pub(crate) fn pretty(v: &Value) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("json values serialize");
    s.push(b'\n');
    s
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn run(command: Command, opts: &RunOptions) -> Result<Outcome, CliError> {
    let start = Instant::now();
    let text = fs::read(&opts.config).map_err(|source| CliError::Io { path: opts.config.clone(), source })?;
    let config = Config::parse(&text)?;
    let seed = opts.seed.unwrap_or(config.seed);
    let hash = sha256_hex(&text);
    fs::create_dir_all(&opts.out).map_err(|source| CliError::Io { path: opts.out.clone(), source })?;

    let ctx = commands::Context::new(&config, seed, &opts.out)?;
    let mut contracts = Contracts::default();
    let (results, mut files) = commands::dispatch(command, &ctx, &mut contracts)?;

    let pass = contracts.all();
    let report = json!({
        "command": command.name(),
        "builtin": ctx.builtin.name(),
        "config_sha256": hash,
        "seed": seed,
        "pass": pass,
        "contracts": contracts.to_json(),
        "results": results,
    });
    write_file(&opts.out, "report.json", &pretty(&report))?;
    files.push("report.json".into());

    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let meta = json!({
        "command": command.name(),
        "config_sha256": hash,
        "seed": seed,
        "timestamp_unix": timestamp,
        "elapsed_seconds": start.elapsed().as_secs_f64(),
        "version": env!("CARGO_PKG_VERSION"),
        "threads": rayon_threads(),
    });
    write_file(&opts.out, "meta.json", &pretty(&meta))?;
    files.push("meta.json".into());
    Ok(Outcome { pass, report, files })
}

fn rayon_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}
