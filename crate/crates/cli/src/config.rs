//! Run configuration: a TOML file plus `key.path=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use phn_core::data::{Schema, SyntheticSpec, DEFAULT_MIN_FREQUENCY};
use phn_core::diagnostics::DEFAULT_EPSILON;
use phn_core::{ModelConfig, TrainSpec};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    /// `criteo`, `avazu` or `synthetic`.
    pub format: String,
    /// Field count of a synthetic file; read from its first line when absent.
    pub fields: Option<usize>,
    /// Optional true-probability side file, used for the oracle AUC.
    pub probabilities: Option<PathBuf>,
    pub split: [f64; 3],
    pub split_seed: u64,
    pub min_frequency: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::from("data.tsv"),
            format: "synthetic".into(),
            fields: None,
            probabilities: None,
            split: [0.8, 0.1, 0.1],
            split_seed: 1,
            min_frequency: DEFAULT_MIN_FREQUENCY,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub epsilon: f64,
    pub sample_count: usize,
    pub seed: u64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            sample_count: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    /// Runs every cell sequentially and records zero wall time.
    pub deterministic: bool,
    pub data: DataConfig,
    /// `vocab_sizes` is filled in from the data.
    pub model: ModelConfig,
    pub train: TrainSpec,
    pub diagnostics: DiagnosticsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/latest"),
            deterministic: false,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainSpec::default(),
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Usage(format!("cannot serialize config: {e}")))
    }

    /// Files a command reads: the config file itself plus the data files.
    pub fn inputs<'a>(&'a self, config_file: Option<&'a Path>) -> Vec<Option<&'a Path>> {
        vec![
            config_file,
            Some(self.data.path.as_path()),
            self.data.probabilities.as_deref(),
        ]
    }

    pub fn schema(&self) -> Result<Schema> {
        let fields = match (self.data.format.as_str(), self.data.fields) {
            ("synthetic", None) => count_fields(&self.data.path)?,
            (_, f) => f.unwrap_or(0),
        };
        Ok(Schema::by_name(&self.data.format, fields)?)
    }
}

fn count_fields(path: &Path) -> Result<usize> {
    let text = read_data(path)?;
    let first = text.lines().next().unwrap_or("");
    Ok(first.split('\t').count().saturating_sub(1))
}

/// Reads a data file, mapping a missing file to [`CliError::DataNotFound`].
pub fn read_data(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::DataNotFound(path.to_path_buf()),
        _ => CliError::io(format!("reading {}", path.display()), e),
    })
}

/// Loads `path` (or the defaults), applies overrides in order, then checks the
/// result by deserializing it.
pub fn resolve<C: serde::de::DeserializeOwned>(path: Option<&Path>, overrides: &[String]) -> Result<C> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => CliError::ConfigFile {
                    path: p.to_path_buf(),
                    reason: "file not found".into(),
                },
                _ => CliError::io(format!("reading {}", p.display()), e),
            })?;
            text.parse::<Table>().map_err(|e| CliError::ConfigFile {
                path: p.to_path_buf(),
                reason: e.to_string(),
            })?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let origin = path.map_or_else(|| PathBuf::from("<flags>"), Path::to_path_buf);
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::ConfigFile {
            path: origin,
            reason: e.to_string(),
        })
}

/// Applies `a.b.c=value`. The value is read as a TOML literal and falls back
/// to a bare string.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{assignment}` is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("override key `{key}` is malformed")));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut node = table;
    for p in parents {
        let entry = node.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override key `{key}`: `{p}` is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// Spec file for `gen-data`, with the same override mechanism.
pub fn resolve_synthetic(path: Option<&Path>, overrides: &[String]) -> Result<SyntheticSpec> {
    resolve(path, overrides)
}
