//! Declarative experiment configuration.
//!
//! Every field is required unless it is an `Option`; nothing is filled in
//! behind the user's back. `--set a.b=value` overrides are applied to the
//! parsed TOML tree before validation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{Band, Environment, SyntheticSpec};
use crate::error::io_err;
use crate::model::{ChannelStrategy, ModelSpec, Task};
use crate::nn::{weights::sha256_hex, BackboneKind};
use crate::splits::Protocol;
use crate::train::TrainConfig;
use crate::transform::TransformConfig;
use crate::{Error, Result};

/// Environment variable naming the dataset root for `source = "directory"`.
pub const DATASET_ROOT_ENV: &str = "CSI_DATASET_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Directory,
    Synthetic,
}

/// One environment or all of them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvironmentFilter {
    All,
    Only(Environment),
}

impl EnvironmentFilter {
    pub fn accepts(self, e: Environment) -> bool {
        match self {
            EnvironmentFilter::All => true,
            EnvironmentFilter::Only(x) => x == e,
        }
    }
}

impl fmt::Display for EnvironmentFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvironmentFilter::All => f.write_str("all"),
            EnvironmentFilter::Only(e) => write!(f, "{e}"),
        }
    }
}

impl FromStr for EnvironmentFilter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.trim() == "all" {
            Ok(EnvironmentFilter::All)
        } else {
            s.parse().map(EnvironmentFilter::Only)
        }
    }
}

impl Serialize for EnvironmentFilter {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EnvironmentFilter {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Dataset directory; falls back to `$CSI_DATASET_ROOT` when absent.
    pub root: Option<PathBuf>,
    pub band: Band,
    pub environment: EnvironmentFilter,
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(with = "backbone_name")]
    pub backbone: BackboneKind,
    pub pretrained: bool,
    pub weights: Option<PathBuf>,
    pub channel_strategy: ChannelStrategy,
    pub init_seed: u64,
}

mod backbone_name {
    use super::*;

    pub fn serialize<S: Serializer>(k: &BackboneKind, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(k.as_str())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BackboneKind, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub kind: Protocol,
    /// One standard split per seed; ignored by the fixed LOEO/LUO folds.
    pub seeds: Vec<u64>,
    pub train_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub batch_size: usize,
    /// Split whose test samples feed the invariance analysis.
    pub analyze_split: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: Task,
    pub precision: Precision,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub transform: TransformConfig,
    pub train: TrainConfig,
    pub protocol: ProtocolConfig,
    pub evaluation: EvaluationConfig,
}

/// Parses `key.path=value`. The value is read as a TOML literal when it
/// parses as one, otherwise as a bare string.
pub fn parse_override(text: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` is not KEY=VALUE")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` has an empty component")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn apply_override(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path `{}` crosses a non-table", path.join("."))))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (path, value) = parse_override(o)?;
            apply_override(&mut table, &path, value)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.transform.validate()?;
        self.train.validate()?;
        match self.data.source {
            DataSource::Synthetic => {
                let spec = self
                    .data
                    .synthetic
                    .as_ref()
                    .ok_or_else(|| Error::Config("synthetic source needs [data.synthetic]".into()))?;
                spec.validate()?;
                if spec.band != self.data.band {
                    return Err(Error::Config(format!(
                        "data.band {} differs from data.synthetic.band {}",
                        self.data.band, spec.band
                    )));
                }
            }
            DataSource::Directory => {
                if self.data.synthetic.is_some() {
                    return Err(Error::Config("[data.synthetic] given for a directory source".into()));
                }
            }
        }
        if self.model.pretrained && self.model.weights.is_none() {
            return Err(Error::Config("model.pretrained = true needs model.weights".into()));
        }
        if self.protocol.kind == Protocol::Standard && self.protocol.seeds.is_empty() {
            return Err(Error::Config("standard protocol needs at least one seed".into()));
        }
        if !(self.protocol.train_ratio > 0.0 && self.protocol.train_ratio < 1.0) {
            return Err(Error::Config("protocol.train_ratio must lie in (0, 1)".into()));
        }
        if self.evaluation.batch_size == 0 {
            return Err(Error::Config("evaluation.batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Hash of everything that influences results; `output_dir` is excluded.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        sha256_hex(json.as_bytes())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            task: self.task,
            backbone: self.model.backbone,
            pretrained: self.model.pretrained,
            weights: self.model.weights.clone(),
            channel_strategy: self.model.channel_strategy,
            init_seed: self.model.init_seed,
        }
    }

    /// Dataset directory from the config or the environment.
    pub fn dataset_root(&self) -> Result<PathBuf> {
        if let Some(r) = &self.data.root {
            return Ok(r.clone());
        }
        std::env::var_os(DATASET_ROOT_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config(format!("no data.root and ${DATASET_ROOT_ENV} is unset")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const DESK: &str = include_str!("../../../../configs/desk_counting.toml");

    #[test]
    fn desk_config_parses_and_round_trips() {
        let cfg = ExperimentConfig::from_toml_str(DESK, &[]).unwrap();
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.fingerprint(), again.fingerprint());
    }

    #[test]
    fn overrides_replace_nested_values() {
        let cfg = ExperimentConfig::from_toml_str(
            DESK,
            &["train.epochs=1".into(), "data.environment=classroom".into(), "name=\"x y\"".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 1);
        assert_eq!(cfg.data.environment, EnvironmentFilter::Only(Environment::Classroom));
        assert_eq!(cfg.name, "x y");
        let base = ExperimentConfig::from_toml_str(DESK, &[]).unwrap();
        assert_ne!(cfg.fingerprint(), base.fingerprint());
        let moved = ExperimentConfig::from_toml_str(DESK, &["output_dir=elsewhere".into()]).unwrap();
        assert_eq!(moved.fingerprint(), base.fingerprint());
    }

    #[test]
    fn unknown_and_missing_fields_are_rejected() {
        assert!(ExperimentConfig::from_toml_str(DESK, &["train.epochz=3".into()]).is_err());
        let without = DESK.replace("focal_gamma", "# focal_gamma");
        assert!(ExperimentConfig::from_toml_str(&without, &[]).is_err());
        assert!(ExperimentConfig::from_toml_str(DESK, &["model.pretrained=true".into()]).is_err());
        assert!(parse_override("novalue").is_err());
    }
}
