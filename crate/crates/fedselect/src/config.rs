//! JSON experiment configuration.
//!
//! Keys are full words; the comments give the usual symbol for each knob.

use std::path::{Path, PathBuf};

use fedselect_core::gradltn::{ReturnPoint, StopCondition};
use fedselect_core::localalt::{LocalAltConfig, PassOrder};
use fedselect_core::model::ModelSpec;
use fedselect_core::server::{AggregationConfig, ClientWeights, FedAvgConfig, FedAvgWeighting, FedSelectConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RunError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Fedselect,
    Fedavg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DataSpec {
    /// Gaussian class blobs generated from the experiment seed.
    Synthetic {
        /// Pool examples per class. Defaults to just enough for every
        /// client to get fresh examples.
        #[serde(default)]
        per_class: Option<usize>,
        /// Within-class standard deviation.
        spread: f64,
    },
    /// A pool read from CSV; relative paths resolve against the config file.
    Csv { path: PathBuf },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Synthetic {
            per_class: None,
            spread: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden_dims: vec![64],
            num_classes: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    /// N
    pub clients: usize,
    /// K
    pub participation: f64,
    /// R
    pub rounds: usize,
    /// s
    pub classes_per_client: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// p, the keep fraction of every pruning step.
    pub personalization_rate: f64,
    /// L
    pub gradltn_iterations: usize,
    /// E, local epochs per search iteration.
    pub gradltn_epochs: usize,
    /// LocalAlt epochs; also the local epochs of a FedAvg client.
    pub localalt_epochs: usize,
    /// eta, used everywhere unless a per-partition rate is given.
    pub lr: f64,
    pub lr_shared: Option<f64>,
    pub lr_personal: Option<f64>,
    pub batch_size: usize,
    pub model: ModelConfig,
    pub data: DataSpec,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub return_point: ReturnPoint,
    pub localalt_order: PassOrder,
    pub stop: StopCondition,
    pub aggregation: AggregationConfig,
    pub fedavg_weighting: FedAvgWeighting,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Fedselect,
            clients: 10,
            participation: 1.0,
            rounds: 20,
            classes_per_client: 2,
            train_per_class: 20,
            test_per_class: 100,
            personalization_rate: 0.5,
            gradltn_iterations: 5,
            gradltn_epochs: 5,
            localalt_epochs: 5,
            lr: 0.05,
            lr_shared: None,
            lr_personal: None,
            batch_size: 10,
            model: ModelConfig::default(),
            data: DataSpec::default(),
            seed: 0,
            output_dir: PathBuf::from("out"),
            return_point: ReturnPoint::RoundStart,
            localalt_order: PassOrder::VFirst,
            stop: StopCondition::default(),
            aggregation: AggregationConfig::default(),
            fedavg_weighting: FedAvgWeighting::DatasetSize,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub personalization_rate: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| RunError::config(json_field(&e), e.to_string()))
    }

    /// Reads a config file. A relative CSV path is rebased onto the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::config("config", format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let DataSpec::Csv { path: csv } = &mut cfg.data {
            if csv.is_relative() {
                if let Some(dir) = path.parent() {
                    *csv = dir.join(&*csv);
                }
            }
        }
        Ok(cfg)
    }

    /// Applies the overrides and returns the names of the keys they changed.
    pub fn apply(&mut self, o: &Overrides) -> Vec<&'static str> {
        let mut changed = Vec::new();
        if let Some(seed) = o.seed {
            self.seed = seed;
            changed.push("seed");
        }
        if let Some(dir) = &o.output_dir {
            self.output_dir = dir.clone();
            changed.push("output_dir");
        }
        if let Some(p) = o.personalization_rate {
            self.personalization_rate = p;
            changed.push("personalization_rate");
        }
        changed
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: usize| {
            if v == 0 {
                Err(RunError::config(field, "must be at least 1"))
            } else {
                Ok(())
            }
        };
        let rate = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(RunError::config(field, "must be positive and finite"))
            }
        };
        positive("clients", self.clients)?;
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(RunError::config("participation", "K must lie in (0, 1]"));
        }
        if !(self.personalization_rate > 0.0 && self.personalization_rate <= 1.0) {
            return Err(RunError::config(
                "personalization_rate",
                format!("p must lie in (0, 1], got {}", self.personalization_rate),
            ));
        }
        positive("classes_per_client", self.classes_per_client)?;
        positive("train_per_class", self.train_per_class)?;
        positive("test_per_class", self.test_per_class)?;
        positive("gradltn_iterations", self.gradltn_iterations)?;
        positive("gradltn_epochs", self.gradltn_epochs)?;
        positive("localalt_epochs", self.localalt_epochs)?;
        positive("batch_size", self.batch_size)?;
        rate("lr", self.lr)?;
        if let Some(lr) = self.lr_shared {
            rate("lr_shared", lr)?;
        }
        if let Some(lr) = self.lr_personal {
            rate("lr_personal", lr)?;
        }
        self.model_spec()?;
        if self.classes_per_client > self.model.num_classes {
            return Err(RunError::config(
                "classes_per_client",
                format!("s cannot exceed model.num_classes ({})", self.model.num_classes),
            ));
        }
        if let DataSpec::Synthetic { per_class, spread } = &self.data {
            rate("data.spread", *spread)?;
            if let Some(n) = *per_class {
                let need = self.train_per_class + self.test_per_class;
                if n < need {
                    return Err(RunError::config(
                        "data.per_class",
                        format!("must be at least train_per_class + test_per_class = {need}"),
                    ));
                }
            }
        }
        for (field, v) in [
            ("stop.target_personal_fraction", self.stop.target_personal_fraction),
            ("stop.min_train_accuracy", self.stop.min_train_accuracy),
        ] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(RunError::config(field, "must lie in [0, 1]"));
                }
            }
        }
        if let ClientWeights::PerClient(w) = &self.aggregation.client_weights {
            if w.len() != self.clients {
                return Err(RunError::config(
                    "aggregation.client_weights",
                    format!("expected {} weights, got {}", self.clients, w.len()),
                ));
            }
            if w.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
                return Err(RunError::config(
                    "aggregation.client_weights",
                    "weights must be positive",
                ));
            }
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let m = &self.model;
        ModelSpec::new(m.input_dim, m.hidden_dims.clone(), m.num_classes)
            .map_err(|e| RunError::config("model", e.to_string()))
    }

    /// Pool examples per class for the synthetic generator.
    pub fn synthetic_per_class(&self) -> usize {
        match self.data {
            DataSpec::Synthetic { per_class: Some(n), .. } => n,
            _ => {
                let slots = self.clients * self.classes_per_client;
                slots.div_ceil(self.model.num_classes) * (self.train_per_class + self.test_per_class)
            }
        }
    }

    pub fn fedselect(&self) -> FedSelectConfig {
        FedSelectConfig {
            participation: self.participation,
            personalization_rate: self.personalization_rate,
            gradltn_iterations: self.gradltn_iterations,
            gradltn_epochs: self.gradltn_epochs,
            localalt: LocalAltConfig {
                epochs: self.localalt_epochs,
                lr_u: self.lr_shared.unwrap_or(self.lr),
                lr_v: self.lr_personal.unwrap_or(self.lr),
                batch_size: self.batch_size,
                order: self.localalt_order,
            },
            lr: self.lr,
            batch_size: self.batch_size,
            return_point: self.return_point,
            stop: self.stop,
            aggregation: self.aggregation.clone(),
            seed: self.seed,
        }
    }

    pub fn fedavg(&self) -> FedAvgConfig {
        FedAvgConfig {
            participation: self.participation,
            local_epochs: self.localalt_epochs,
            lr: self.lr_shared.unwrap_or(self.lr),
            batch_size: self.batch_size,
            weighting: self.fedavg_weighting,
            seed: self.seed,
        }
    }
}

/// Best guess at the key a serde error is about, for the error message.
fn json_field(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    for marker in ["unknown field `", "missing field `"] {
        if let Some(start) = msg.find(marker) {
            let rest = &msg[start + marker.len()..];
            if let Some(end) = rest.find('`') {
                return rest[..end].to_string();
            }
        }
    }
    "config".to_string()
}
