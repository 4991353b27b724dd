//! Run configuration: a flat TOML file plus `--key value` overrides.
//!
//! Keys accept `-` or `_` interchangeably. Every value goes through
//! [`RunConfig::set`], so file entries and overrides parse identically.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::Serialize;

use crate::classifier::{EmbedClfConfig, EnsembleConfig, SvmConfig};
use crate::error::{Error, Result};
use crate::regressor::{Aggregation, Optimizer, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    External,
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mock" => Ok(BackendKind::Mock),
            "external" => Ok(BackendKind::External),
            _ => Err(Error::Config(format!("unknown backend '{s}' (expected mock or external)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub manifest_path: Option<PathBuf>,
    pub run_dir: PathBuf,
    pub seed: u64,
    pub dev_fraction: f64,
    pub jobs: usize,
    pub asr_backend: BackendKind,
    pub encoder_backend: BackendKind,
    pub asr_command: Option<String>,
    pub encoder_command: Option<String>,
    pub acoustic_command: Option<String>,
    pub backend_timeout_s: u64,
    pub train: TrainConfig,
    pub aggregation: Aggregation,
    pub concat_acoustic: bool,
    pub svm: SvmConfig,
    pub embed_clf: EmbedClfConfig,
    pub ensemble: EnsembleConfig,
    pub binary_mode: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest_path: None,
            run_dir: PathBuf::from("run"),
            seed: 42,
            dev_fraction: 0.2,
            jobs: 4,
            asr_backend: BackendKind::Mock,
            encoder_backend: BackendKind::Mock,
            asr_command: None,
            encoder_command: None,
            acoustic_command: None,
            backend_timeout_s: 300,
            train: TrainConfig::default(),
            aggregation: Aggregation::Mean,
            concat_acoustic: false,
            svm: SvmConfig::default(),
            embed_clf: EmbedClfConfig::default(),
            ensemble: EnsembleConfig::default(),
            binary_mode: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

fn non_empty(value: &str) -> Option<String> {
    let v = value.trim();
    (!v.is_empty()).then(|| v.to_string())
}

impl RunConfig {
    /// Reads a flat TOML file; nested tables are rejected.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.merge_file(path)?;
        Ok(cfg)
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for (key, value) in table {
            let value = match value {
                toml::Value::String(s) => s,
                toml::Value::Integer(i) => i.to_string(),
                toml::Value::Float(f) => f.to_string(),
                toml::Value::Boolean(b) => b.to_string(),
                other => {
                    return Err(Error::Config(format!(
                        "{}: key '{key}' must be a scalar, found {}",
                        path.display(),
                        other.type_str()
                    )))
                }
            };
            self.set(&key, &value)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().trim_start_matches("--").replace('-', "_");
        let k = key.as_str();
        match k {
            "manifest" | "manifest_path" => self.manifest_path = non_empty(value).map(PathBuf::from),
            "run_dir" => self.run_dir = PathBuf::from(value.trim()),
            "seed" => {
                self.seed = parse(k, value)?;
                self.train.seed = self.seed;
                self.svm.seed = self.seed;
                self.embed_clf.seed = self.seed;
            }
            "dev_fraction" => self.dev_fraction = parse(k, value)?,
            "jobs" => self.jobs = parse(k, value)?,
            "asr_backend" => self.asr_backend = parse(k, value)?,
            "encoder_backend" => self.encoder_backend = parse(k, value)?,
            "asr_command" => self.asr_command = non_empty(value),
            "encoder_command" => self.encoder_command = non_empty(value),
            "acoustic_command" => self.acoustic_command = non_empty(value),
            "backend_timeout_s" | "timeout_s" => self.backend_timeout_s = parse(k, value)?,
            "learning_rate" | "lr" => self.train.learning_rate = parse(k, value)?,
            "epochs" => self.train.epochs = parse(k, value)?,
            "batch_size" => self.train.batch_size = parse(k, value)?,
            "optimizer" => {
                self.train.optimizer = match value.trim() {
                    "adam" => Optimizer::Adam,
                    "sgd" => Optimizer::Sgd,
                    other => return Err(Error::Config(format!("unknown optimizer '{other}'"))),
                }
            }
            "init" => {
                if value.trim() != "glorot_uniform" {
                    return Err(Error::Config(format!("unknown init '{}'", value.trim())));
                }
            }
            "beta1" => self.train.beta1 = parse(k, value)?,
            "beta2" => self.train.beta2 = parse(k, value)?,
            "epsilon" => self.train.epsilon = parse(k, value)?,
            "aggregation" => {
                self.aggregation = match value.trim() {
                    "mean" => Aggregation::Mean,
                    "median" => Aggregation::Median,
                    other => return Err(Error::Config(format!("unknown aggregation '{other}'"))),
                }
            }
            "concat_acoustic" => self.concat_acoustic = parse(k, value)?,
            "svm_lambda" => self.svm.lambda = parse(k, value)?,
            "svm_epochs" => self.svm.epochs = parse(k, value)?,
            "clf_learning_rate" | "clf_lr" => self.embed_clf.learning_rate = parse(k, value)?,
            "clf_epochs" => self.embed_clf.epochs = parse(k, value)?,
            "w_svm" => self.ensemble.w_svm = parse(k, value)?,
            "w_text" => self.ensemble.w_text = parse(k, value)?,
            "binary_mode" => self.binary_mode = parse(k, value)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
            return Err(Error::Config(format!("dev_fraction must be in (0, 1), got {}", self.dev_fraction)));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if self.asr_backend == BackendKind::External && self.asr_command.is_none() {
            return Err(Error::Config("asr_backend = external requires asr_command".into()));
        }
        if self.encoder_backend == BackendKind::External && self.encoder_command.is_none() {
            return Err(Error::Config("encoder_backend = external requires encoder_command".into()));
        }
        self.train.validate()?;
        self.ensemble.validate()
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.backend_timeout_s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.seed, 42);
        assert_eq!(c.dev_fraction, 0.2);
        assert_eq!(c.jobs, 4);
        assert_eq!(c.ensemble, EnsembleConfig { w_svm: 0.6, w_text: 0.4 });
        c.validate().unwrap();
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "seed = 7\ndev-fraction = 0.25\nepochs = 20\nlearning_rate = 0.01\nconcat_acoustic = true\nasr_backend = \"mock\"\n",
        )
        .unwrap();
        let mut c = RunConfig::from_file(&path).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.dev_fraction, 0.25);
        assert_eq!(c.train.epochs, 20);
        assert!(c.concat_acoustic);
        c.set("--epochs", "30").unwrap();
        c.set("w-svm", "0.5").unwrap();
        c.set("w_text", "0.5").unwrap();
        assert_eq!(c.train.epochs, 30);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_input() {
        let mut c = RunConfig::default();
        assert!(c.set("no_such_key", "1").is_err());
        assert!(c.set("epochs", "many").is_err());
        c.set("asr_backend", "external").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.set("asr_command", "whisper-cli").unwrap();
        c.validate().unwrap();
        c.set("w_svm", "0.9").unwrap();
        assert!(c.validate().is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[section]\nx = 1\n").unwrap();
        assert!(RunConfig::from_file(&path).is_err());
    }
}
