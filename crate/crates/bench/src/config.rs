//! Experiment configuration: a sectioned TOML file plus `key=value`
//! overrides, merged and validated into an [`ExperimentConfig`].

use std::path::{Path, PathBuf};

use fedloc_core::dataset::{TransformConfig, MIN_RSS_DBM, NUM_CLASSES, NUM_WAPS};
use fedloc_core::fedcore::SimConfig;
use fedloc_core::{Architecture, PartitionConfig, PartitionMode};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use toml::{Table, Value};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid value for `{field}`: {message}")]
    Field { field: String, message: String },
    #[error("unknown config key or sweep axis `{0}`")]
    UnknownKey(String),
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub train_path: PathBuf,
    pub validation_path: Option<PathBuf>,
    pub min_rss: f64,
    pub alpha: f64,
    /// Share of the training file held out for testing.
    pub test_fraction: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let t = TransformConfig::default();
        Self {
            train_path: PathBuf::from("data/trainingData.csv"),
            validation_path: None,
            min_rss: t.min_rss,
            alpha: t.alpha,
            test_fraction: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub labeled_ratio: f64,
    pub mode: PartitionMode,
    pub concentration: f64,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self {
            labeled_ratio: 0.3,
            mode: PartitionMode::NonIid,
            concentration: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Phones reported separately.
    pub heldout_phones: Vec<u32>,
    /// Remove the held-out phones from training and evaluate on all of
    /// their samples instead of only their test-split share.
    pub exclude_heldout_phones: bool,
    /// Evaluate every round on the test split (recorded in the history).
    pub every_round: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            heldout_phones: vec![8, 10, 22, 23, 24],
            exclude_heldout_phones: false,
            every_round: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Write per-client checkpoints every this many rounds; final models
    /// are always written. 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub partition: PartitionSection,
    pub fl: SimConfig,
    pub model: Architecture,
    pub eval: EvalSection,
    pub output: OutputSection,
}

/// Sweep axis shorthands and the config keys they set.
pub const AXES: [(&str, &str); 8] = [
    ("similarity_threshold", "fl.similarity_threshold"),
    ("max_similar_clients", "fl.max_similar_clients"),
    ("clients", "fl.clients"),
    ("rounds", "fl.rounds"),
    ("strategy", "fl.strategy"),
    ("seed", "fl.seed"),
    ("concentration", "partition.concentration"),
    ("mu", "fl.mu"),
];

/// Resolves an axis shorthand or dotted key to a dotted key known to the
/// schema.
pub fn resolve_key(name: &str) -> Result<String> {
    if let Some((_, key)) = AXES.iter().find(|(a, _)| *a == name) {
        return Ok(key.to_string());
    }
    let defaults = Value::try_from(ExperimentConfig::default()).expect("defaults serialise");
    let mut node = &defaults;
    let parts: Vec<&str> = name.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        match node.as_table().and_then(|t| t.get(*part)) {
            Some(v) => node = v,
            // Optional keys are absent from the serialised defaults.
            None if k == parts.len() - 1 && name == "dataset.validation_path" => return Ok(name.into()),
            None => return Err(ConfigError::UnknownKey(name.into())),
        }
    }
    if parts.len() < 2 || node.is_table() {
        return Err(ConfigError::UnknownKey(name.into()));
    }
    Ok(name.into())
}

/// Parses an override value as TOML, falling back to a bare string.
pub fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets a dotted key inside a TOML table, creating sections as needed.
pub fn set_key(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let key = resolve_key(key)?;
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts.pop().expect("resolved keys are dotted");
    let mut node = table;
    for p in parts {
        node = node
            .entry(p)
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError::Field {
                field: p.into(),
                message: "expected a section".into(),
            })?;
    }
    node.insert(leaf.into(), value);
    Ok(())
}

/// Splits `key=value`.
pub fn parse_override(raw: &str) -> Result<(String, Value)> {
    let (k, v) = raw
        .split_once('=')
        .ok_or_else(|| ConfigError::Parse(format!("override `{raw}` is not key=value")))?;
    Ok((k.trim().to_string(), parse_value(v.trim())))
}

impl ExperimentConfig {
    /// Builds a config from TOML text plus overrides. Relative paths are
    /// resolved against `base_dir`.
    pub fn from_toml(text: &str, overrides: &[(String, Value)], base_dir: &Path) -> Result<Self> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for (k, v) in overrides {
            set_key(&mut table, k, v.clone())?;
        }
        let mut cfg: ExperimentConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, Value)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, overrides, base)
    }

    /// Same config with more overrides applied.
    pub fn with_overrides(&self, overrides: &[(String, Value)]) -> Result<Self> {
        let mut table = Value::try_from(self).expect("config serialises").as_table().cloned().expect("table");
        for (k, v) in overrides {
            set_key(&mut table, k, v.clone())?;
        }
        let cfg: ExperimentConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset.train_path);
        if let Some(p) = self.dataset.validation_path.as_mut() {
            fix(p);
        }
        fix(&mut self.output.dir);
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, message: String| {
            Err(ConfigError::Field {
                field: f.into(),
                message,
            })
        };
        if let Err(e) = self.transform().validate() {
            return field("dataset.min_rss", e.to_string());
        }
        if self.dataset.min_rss < MIN_RSS_DBM as f64 - 1000.0 {
            return field("dataset.min_rss", "implausibly small".into());
        }
        if !(self.dataset.test_fraction > 0.0 && self.dataset.test_fraction < 1.0) {
            return field("dataset.test_fraction", format!("must be in (0, 1), got {}", self.dataset.test_fraction));
        }
        let m = self.fl.similarity_threshold;
        if !(m > 0.0 && m < 1.0) {
            return field("fl.similarity_threshold", format!("must be in (0, 1), got {m}"));
        }
        if let Err(e) = self.fl.validate() {
            return field("fl", e.to_string());
        }
        if let Err(e) = self.partition_config().validate() {
            return field("partition", e.to_string());
        }
        if self.partition.mode == PartitionMode::NonIid && self.fl.clients < 2 {
            return field("partition.mode", "non-IID partitioning needs at least 2 clients".into());
        }
        if let Err(e) = self.model.validate() {
            return field("model", e.to_string());
        }
        if self.model.autoencoder.encoder_dims[0] != NUM_WAPS {
            return field("model.autoencoder.encoder_dims", format!("must start with {NUM_WAPS}"));
        }
        if self.model.classifier.classes != NUM_CLASSES {
            return field("model.classifier.classes", format!("must be {NUM_CLASSES}"));
        }
        Ok(())
    }

    pub fn transform(&self) -> TransformConfig {
        TransformConfig {
            min_rss: self.dataset.min_rss,
            alpha: self.dataset.alpha,
        }
    }

    pub fn partition_config(&self) -> PartitionConfig {
        PartitionConfig {
            n_clients: self.fl.clients,
            labeled_ratio: self.partition.labeled_ratio,
            mode: self.partition.mode,
            concentration: self.partition.concentration,
            seed: self.fl.seed,
        }
    }

    /// The effective config as TOML; loading it reproduces `self`.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the echoed config without its `[output]` section, so
    /// reruns into another directory share a digest.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output = OutputSection::default();
        Sha256::digest(c.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_simulation_table() {
        let cfg = ExperimentConfig::from_toml("", &[], Path::new("/x")).unwrap();
        assert_eq!(cfg.fl.clients, 10);
        assert_eq!(cfg.fl.batch_size, 64);
        assert_eq!(cfg.fl.local_epochs, 75);
        assert_eq!(cfg.fl.rounds, 35);
        assert_eq!(cfg.fl.initial_rounds, 5);
        assert_eq!(cfg.fl.max_similar_clients, 4);
        assert_eq!(cfg.fl.similarity_threshold, 0.5);
        assert_eq!(cfg.fl.beta1, 0.1);
        assert_eq!(cfg.dataset.train_path, Path::new("/x/data/trainingData.csv"));
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = ExperimentConfig::from_toml("[fl]\nroundz = 3\n", &[], Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("roundz"), "{err}");
        let err = ExperimentConfig::from_toml("[flx]\n", &[], Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("flx"), "{err}");
        let err = resolve_key("fl.nope").unwrap_err();
        assert!(err.to_string().contains("fl.nope"));
    }

    #[test]
    fn overrides_win_and_aliases_resolve() {
        let o = vec![
            parse_override("rounds=3").unwrap(),
            parse_override("fl.strategy=fedavg").unwrap(),
            parse_override("similarity_threshold = 0.3").unwrap(),
        ];
        let cfg = ExperimentConfig::from_toml("[fl]\nrounds = 9\n", &o, Path::new(".")).unwrap();
        assert_eq!(cfg.fl.rounds, 3);
        assert_eq!(cfg.fl.similarity_threshold, 0.3);
        assert_eq!(cfg.fl.strategy, fedloc_core::Strategy::FedAvg);
    }

    #[test]
    fn field_errors_name_the_field() {
        let err = ExperimentConfig::from_toml("[fl]\nsimilarity_threshold = 1.5\n", &[], Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("fl.similarity_threshold"), "{err}");
        let err = ExperimentConfig::from_toml("[dataset]\ntest_fraction = 0.0\n", &[], Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("dataset.test_fraction"), "{err}");
    }

    #[test]
    fn echo_round_trips() {
        let o = vec![parse_override("dataset.validation_path=\"v.csv\"").unwrap()];
        let cfg = ExperimentConfig::from_toml("[fl]\nclients = 3\nmax_similar_clients = 2\n", &o, Path::new("/base")).unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml(), &[], Path::new("/elsewhere")).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.digest(), again.digest());
        assert_eq!(cfg.digest().len(), 64);
    }
}
