//! Experiment configuration: JSON file values overlaid by command-line flags.

use std::path::{Path, PathBuf};

use fedids::data::{SyntheticSpec, DEFAULT_LABEL_COLUMN};
use fedids::model::ModelConfig;
use fedids::tensor::AdamConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// CSV file; when absent, `synthetic` is generated in memory.
    pub path: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    pub label_column: String,
    pub train_fraction: f64,
    /// Stratified subsample applied on load.
    pub fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            synthetic: None,
            label_column: DEFAULT_LABEL_COLUMN.into(),
            train_fraction: 0.8,
            fraction: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// 0 writes the initialized model without training.
    pub epochs: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            weight_decay: adam.weight_decay,
            batch_size: 32,
            epochs: 4,
        }
    }
}

impl TrainingConfig {
    pub fn optimizer(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederatedConfig {
    pub clients: usize,
    /// Dirichlet concentration; ignored when `iid` is set.
    pub alpha: f64,
    pub iid: bool,
    pub rounds: usize,
    pub local_epochs: usize,
    pub workers: Option<usize>,
}

impl Default for FederatedConfig {
    fn default() -> Self {
        Self {
            clients: 10,
            alpha: 0.07,
            iid: false,
            rounds: 10,
            local_epochs: 1,
            workers: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub federated: FederatedConfig,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// The config file named by `path`, or the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn validate_training(&self) -> Result<(), CliError> {
        let t = &self.training;
        if t.batch_size == 0 {
            return Err(CliError::Usage("batch size must be positive".into()));
        }
        self.training
            .optimizer()
            .validate()
            .map_err(CliError::usage)?;
        let d = &self.data;
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(CliError::Usage(format!(
                "train fraction {} not in (0, 1)",
                d.train_fraction
            )));
        }
        if !(d.fraction > 0.0 && d.fraction <= 1.0) {
            return Err(CliError::Usage(format!(
                "sample fraction {} not in (0, 1]",
                d.fraction
            )));
        }
        if d.path.is_none() && d.synthetic.is_none() {
            return Err(CliError::Usage(
                "no dataset: pass --data or set data.synthetic in the config".into(),
            ));
        }
        self.model.validate().map_err(CliError::usage)
    }

    pub fn validate_federated(&self) -> Result<(), CliError> {
        self.validate_training()?;
        let f = &self.federated;
        if f.clients == 0 {
            return Err(CliError::Usage("--clients must be at least 1".into()));
        }
        if f.rounds == 0 || f.local_epochs == 0 {
            return Err(CliError::Usage(
                "rounds and local epochs must be at least 1".into(),
            ));
        }
        if !f.iid && !(f.alpha > 0.0 && f.alpha.is_finite()) {
            return Err(CliError::Usage(format!(
                "alpha must be positive, got {}",
                f.alpha
            )));
        }
        if f.workers == Some(0) {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_base_hyperparameters() {
        let c = ExperimentConfig::default();
        assert_eq!((c.training.lr, c.training.weight_decay), (5e-5, 1e-3));
        assert_eq!((c.training.batch_size, c.training.epochs), (32, 4));
        assert_eq!(
            (c.model.dropout, c.model.seq_len, c.model.vocab_size),
            (0.1, 512, 5000)
        );
        assert_eq!(c.federated.alpha, 0.07);
    }

    #[test]
    fn partial_documents_fill_in_defaults() {
        let c: ExperimentConfig =
            serde_json::from_str(r#"{"model": {"hidden": 64}, "seed": 3}"#).unwrap();
        assert_eq!(c.model.hidden, 64);
        assert_eq!(c.model.num_layers, 4);
        assert_eq!(c.seed, 3);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"modle": {}}"#).is_err());
    }
}
