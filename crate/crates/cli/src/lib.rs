//! Subcommand implementations for the `mter` binary.
//!
//! Every command resolves its configuration (file, then overrides), writes the
//! resolved copy into the output directory, and only then touches data.

pub mod args;
pub mod attack;
pub mod eval;
pub mod train;

use std::path::Path;

use mter::config::RunConfig;
use mter::data::{make_open_set_split, DatasetSplit, TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS};
use mter::seed::derive_seed;
use mter::MterError;
use serde::Deserialize;
use toml::{Table, Value};

use crate::args::Overrides;

/// Failure classes mapped onto process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, arguments or input files.
    User(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::User(m) => write!(f, "error: {m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<MterError> for CliError {
    fn from(e: MterError) -> Self {
        match e {
            MterError::Nn(_) => CliError::Internal(e.to_string()),
            other => CliError::User(other.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn user(msg: impl Into<String>) -> CliError {
    CliError::User(msg.into())
}

fn set_path(table: &mut Table, key: &str, value: Value) -> CliResult<()> {
    let (section, field) = key
        .split_once('.')
        .ok_or_else(|| user(format!("override key {key:?} needs the form section.key")))?;
    let entry = table.entry(section.to_string()).or_insert_with(|| Value::Table(Table::new()));
    let Value::Table(t) = entry else {
        return Err(user(format!("{section} is not a section")));
    };
    t.insert(field.to_string(), value);
    Ok(())
}

/// Reads `path` (if any), applies `overrides` and fills in the data directory.
pub fn resolve_config(path: Option<&Path>, overrides: &Overrides) -> CliResult<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| user(format!("{}: {e}", p.display())))?;
            text.parse::<Table>().map_err(|e| user(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for (k, v) in overrides {
        set_path(&mut table, k, v.clone())?;
    }
    let mut cfg = RunConfig::deserialize(Value::Table(table))
        .map_err(|e| user(format!("invalid configuration: {e}")))?;
    cfg.data.resolve_dir();
    Ok(cfg)
}

/// Loads MNIST as configured: optional open-set split, then seeded subsets.
pub fn load_data(cfg: &RunConfig) -> CliResult<DatasetSplit> {
    let dir = &cfg.data.mnist_dir;
    let missing: Vec<&str> = [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS]
        .into_iter()
        .filter(|f| !dir.join(f).is_file())
        .collect();
    if !missing.is_empty() {
        return Err(user(format!(
            "dataset not found in {} (missing {}); set data.mnist_dir or {}",
            dir.display(),
            missing.join(", "),
            mter::config::DATA_ENV
        )));
    }
    let mut split = DatasetSplit::load_mnist(dir)?;
    if cfg.data.open_set {
        split = make_open_set_split(&split, &cfg.data.train_classes, &cfg.data.probe_classes)?;
    }
    let seed = cfg.run.seed;
    if cfg.data.train_subset > 0 {
        split.train = split.train.sample(cfg.data.train_subset, derive_seed(seed, "train-subset", 0));
    }
    if cfg.data.test_subset > 0 {
        split.test = split.test.sample(cfg.data.test_subset, derive_seed(seed, "test-subset", 0));
    }
    Ok(split)
}

/// File stem used to label a checkpoint in reports.
pub fn model_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}
