//! Run configuration read from TOML. Every field defaults to the desk
//! preset; unknown keys are collected and reported together.

use std::path::PathBuf;

use nac_core::executor::ExecutorConfig;
use nac_core::generator::ConditionalConfig;
use nac_core::graph::{Graphon, GraphonFamily};
use nac_core::model::{Mode, ModelConfig};
use nac_core::tasks::TaskConfig;
use nac_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    /// Width of the learned positional encoding inside `d_token`.
    pub d_pos: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self { d_pos: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    pub output_dir: PathBuf,
    pub task: TaskConfig,
    pub prior: Graphon,
    pub executor: ExecutorConfig,
    pub embedding: EmbeddingConfig,
    pub conditional: ConditionalConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Unconditional,
            output_dir: PathBuf::from("nac-run"),
            task: TaskConfig::default(),
            prior: Graphon::default_for(GraphonFamily::ErdosRenyi),
            executor: ExecutorConfig::desk(),
            embedding: EmbeddingConfig::default(),
            conditional: ConditionalConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Dotted paths of keys in `given` that `known` lacks.
fn unknown_keys(given: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (known.get(k), v) {
            (None, _) => out.push(path),
            (Some(toml::Value::Table(kt)), toml::Value::Table(gt)) => unknown_keys(gt, kt, &path, out),
            _ => {}
        }
    }
}

/// Table of every key a config may contain. Optional fields absent from the
/// defaults are added by hand, and the prior section lists the keys of the
/// family the user chose.
fn known_keys(given: &toml::Table) -> toml::Table {
    let mut known = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
    if let Some(toml::Value::Table(train)) = known.get_mut("train") {
        train.insert("stop_at_accuracy".into(), toml::Value::Float(1.0));
    }
    let family = given
        .get("prior")
        .and_then(|p| p.get("family"))
        .and_then(|f| f.clone().try_into::<GraphonFamily>().ok());
    if let Some(family) = family {
        let prior = toml::Value::try_from(Graphon::default_for(family)).expect("graphon serializes");
        known.insert("prior".into(), prior);
    }
    known
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let mut given: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let mut unknown = Vec::new();
        unknown_keys(&given, &known_keys(&given), "", &mut unknown);
        if !unknown.is_empty() {
            return Err(ConfigError::UnknownKeys(unknown));
        }
        // Missing prior parameters come from the chosen family's defaults.
        if let Some(toml::Value::Table(prior)) = given.get_mut("prior") {
            let family = match prior.get("family") {
                Some(f) => f
                    .clone()
                    .try_into::<GraphonFamily>()
                    .map_err(|e| ConfigError::Parse(e.to_string()))?,
                None => RunConfig::default().prior.family(),
            };
            let toml::Value::Table(defaults) = toml::Value::try_from(Graphon::default_for(family)).expect("graphon serializes")
            else {
                unreachable!("graphons serialize to tables")
            };
            for (k, v) in defaults {
                prior.entry(k).or_insert(v);
            }
        }
        let cfg: RunConfig = given.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = ModelConfig::for_task(&self.task, self.executor, self.mode, self.conditional);
        m.d_pos = self.embedding.d_pos;
        m
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: nac_core::NacError| ConfigError::Invalid(e.to_string());
        self.task.validate().map_err(invalid)?;
        self.prior.validate().map_err(invalid)?;
        self.train.validate().map_err(invalid)?;
        self.model_config().validate().map_err(invalid)?;
        if self.executor.classes != self.task.classes() {
            return Err(ConfigError::Invalid(format!(
                "executor.classes = {} but task {:?} has {} classes",
                self.executor.classes,
                self.task.kind,
                self.task.classes()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_desk_preset() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.executor, ExecutorConfig::desk());
    }

    #[test]
    fn round_trip_is_exact() {
        let cfg = RunConfig::from_toml_str("[train]\nsteps = 77\nwarmup_steps = 7\nstop_at_accuracy = 0.5\n[prior]\nfamily = \"ring_of_cliques\"\nblocks = 4\np_in = 0.8\np_bridge = 0.2\n").unwrap();
        let again = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.train.steps, 77);
    }

    #[test]
    fn family_alone_takes_family_defaults() {
        let cfg = RunConfig::from_toml_str("[prior]\nfamily = \"scale_free\"\n").unwrap();
        assert_eq!(cfg.prior, Graphon::ScaleFree { beta: 0.5 });
    }

    #[test]
    fn every_unknown_key_is_listed() {
        let err = RunConfig::from_toml_str("colour = 1\n[train]\nstepz = 3\n[executor.kernel]\nwidth = 2\n").unwrap_err();
        let ConfigError::UnknownKeys(keys) = err else { panic!("{err}") };
        assert_eq!(keys, vec!["colour", "executor.kernel.width", "train.stepz"]);
        let err = RunConfig::from_toml_str("[prior]\nfamily = \"erdos_renyi\"\nbeta = 0.5\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKeys(k) if k == ["prior.beta"]));
    }

    #[test]
    fn inconsistent_values_are_invalid() {
        assert!(matches!(
            RunConfig::from_toml_str("[train]\nwarmup_steps = 10\nsteps = 5\n"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            RunConfig::from_toml_str("[executor]\nclasses = 3\n"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(RunConfig::from_toml_str("[train\n"), Err(ConfigError::Parse(_))));
    }
}
