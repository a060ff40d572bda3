//! Run configuration: one TOML file aggregating every module's settings,
//! plus `key=value` overrides from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sbl_core::data::{AnnotationFormat, SynthConfig};
use sbl_core::{DetectorConfig, EvalConfig, PredictConfig, TapId, TrainConfig};

use crate::exit::ConfigError;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "SBL_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub predict: PredictConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training corpus directory (or annotation file).
    pub train: Option<PathBuf>,
    /// Held-out corpus used by `eval` and `ablate`.
    pub test: Option<PathBuf>,
    pub format: AnnotationFormat,
    /// Salience statistics file written by `stats` and read by `train`.
    pub stats: Option<PathBuf>,
    /// Extractor weights; the built-in seeded extractor when absent.
    pub extractor: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            test: None,
            format: AnnotationFormat::NativeJson,
            stats: None,
            extractor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    /// Include the unweighted focal-loss row.
    pub baseline: bool,
    pub taps: Vec<TapId>,
    pub new_min: Vec<f64>,
    /// Also train with raw, un-normalized salience as the weight.
    pub raw: bool,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            seeds: vec![0, 1, 2],
            baseline: true,
            taps: vec![TapId::C2],
            new_min: vec![0.3, 0.5, 0.7, 1.0],
            raw: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Parent of per-command run directories when `--out` is not given.
    #[serde(skip_serializing)]
    pub root: Option<PathBuf>,
    /// Write an intermediate checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
}

/// A loaded configuration with the overrides that produced it.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub overrides: Vec<String>,
}

impl LoadedConfig {
    /// Reads `path` (or starts from defaults), applies `key=value` overrides in
    /// order, and resolves relative data paths against the config file's directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let (mut table, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError::new(format!("cannot read config {}: {e}", p.display())))?;
                let table: toml::Table =
                    toml::from_str(&text).map_err(|e| ConfigError::new(format!("{}: {e}", p.display())))?;
                (table, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (toml::Table::new(), PathBuf::new()),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::new(format!("invalid configuration: {e}")))?;
        let d = &mut config.data;
        for p in [
            &mut d.train,
            &mut d.test,
            &mut d.stats,
            &mut d.extractor,
            &mut config.output.root,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        config
            .detector
            .validate()
            .and_then(|_| config.train.validate())
            .and_then(|_| config.synth.validate())
            .map_err(|e| ConfigError::new(e.to_string()))?;
        Ok(LoadedConfig {
            config,
            overrides: overrides.to_vec(),
        })
    }

    /// TOML snapshot of the effective configuration; overrides are listed in
    /// a leading comment block.
    pub fn snapshot(&self) -> Result<String, ConfigError> {
        let mut out = String::new();
        for o in &self.overrides {
            out.push_str(&format!("# override: {o}\n"));
        }
        out.push_str(
            &toml::to_string(&self.config).map_err(|e| ConfigError::new(format!("cannot serialize config: {e}")))?,
        );
        Ok(out)
    }
}

/// Sets a dotted key. The value is parsed as a TOML value, falling back to a
/// bare string, so `train.tap=C3` and `train.learning_rate=1e-3` both work.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::new(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::new(format!("override `{assignment}` has an empty key")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::new(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
