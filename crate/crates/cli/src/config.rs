//! Flat TOML configuration merged with command-line flags (flags win).

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use thiserror::Error;
use toml::{Table, Value};

use mcreg_core::Error as CoreError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 2: configuration or input; 3: documented procedure failure; 1: anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            CliError::Io { .. } => 1,
            CliError::Core(e) => core_exit_code(e),
        }
    }
}

fn core_exit_code(e: &CoreError) -> u8 {
    match e {
        CoreError::Window { source, .. } | CoreError::Cell { source, .. } => core_exit_code(source),
        CoreError::FdpUnavailable { .. } | CoreError::Singular(_) | CoreError::NotPositiveDefinite => 3,
        CoreError::Config(_)
        | CoreError::Parse { .. }
        | CoreError::Shape { .. }
        | CoreError::Dimension { .. }
        | CoreError::TooSmall { .. }
        | CoreError::DegenerateColumn { .. }
        | CoreError::InvalidInput(_) => 2,
        CoreError::Io(_) => 1,
    }
}

pub fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_table(path: Option<&Path>) -> Result<Table, CliError> {
    let Some(path) = path else {
        return Ok(Table::new());
    };
    let text = std::fs::read_to_string(path).map_err(io_error(path))?;
    text.parse::<Table>()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Typed lookup of a top-level key.
pub fn value<T: DeserializeOwned>(table: &Table, key: &str) -> Result<Option<T>, CliError> {
    table
        .get(key)
        .cloned()
        .map(|v| v.try_into::<T>())
        .transpose()
        .map_err(|e| CliError::Config(format!("key `{key}`: {e}")))
}

/// Flag if given, else the config key, else `None`.
pub fn pick<T: DeserializeOwned>(flag: Option<T>, table: &Table, key: &str) -> Result<Option<T>, CliError> {
    match flag {
        Some(v) => Ok(Some(v)),
        None => value(table, key),
    }
}

/// Copies `table` with `overrides` written on top.
pub fn overlay(table: &Table, overrides: Vec<(&str, Option<Value>)>) -> Table {
    let mut out = table.clone();
    for (k, v) in overrides {
        if let Some(v) = v {
            out.insert(k.to_string(), v);
        }
    }
    out
}

/// Options shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Common {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: PathBuf,
}

impl Common {
    pub fn resolve(
        table: &Table,
        seed: Option<u64>,
        workers: Option<usize>,
        out: Option<PathBuf>,
    ) -> Result<Self, CliError> {
        let workers = pick(workers, table, "workers")?;
        if workers == Some(0) {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        Ok(Self {
            seed: pick(seed, table, "seed")?,
            workers,
            out: pick(out, table, "out")?.unwrap_or_else(|| PathBuf::from("out")),
        })
    }

    pub fn require_seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Config("this command is stochastic; pass --seed or set `seed`".into()))
    }
}
