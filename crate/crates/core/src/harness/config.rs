use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LeopardError, Result};
use crate::learner::{LearnerConfig, Switches};
use crate::network::ModelConfig;
use crate::stream::StreamConfig;

/// Widths of the sub-networks; input dimensions and class count come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkShape {
    pub adapter_dim: usize,
    pub extractor_hidden: usize,
    pub feature_dim: usize,
    pub initial_width: usize,
    pub domain_hidden: usize,
}

impl Default for NetworkShape {
    fn default() -> Self {
        let m = ModelConfig::default();
        NetworkShape {
            adapter_dim: m.adapter_dim,
            extractor_hidden: m.extractor_hidden,
            feature_dim: m.feature_dim,
            initial_width: m.initial_width,
            domain_hidden: m.domain_hidden,
        }
    }
}

impl NetworkShape {
    pub fn model_config(&self, source_dim: usize, target_dim: usize, n_classes: usize) -> ModelConfig {
        ModelConfig {
            source_dim,
            target_dim,
            n_classes,
            adapter_dim: self.adapter_dim,
            extractor_hidden: self.extractor_hidden,
            feature_dim: self.feature_dim,
            initial_width: self.initial_width,
            domain_hidden: self.domain_hidden,
        }
    }
}

/// Pre-extracted feature tables used instead of the synthetic generator.
///
/// The first `stream.source_batch_size` source rows form the prerecorded
/// sample; the remaining rows of both files are cut into batches of the
/// configured sizes. Dimensions and the class count are taken from the files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvData {
    pub source: PathBuf,
    pub target: PathBuf,
    pub label_column: String,
    /// Inject scaling-hyperplane drift at the configured batches on top of the data.
    #[serde(default)]
    pub inject_drift: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub stream: StreamConfig,
    pub network: NetworkShape,
    pub learner: LearnerConfig,
    pub n_runs: usize,
    pub seeds: Vec<u64>,
    pub switches: Switches,
    pub output_dir: PathBuf,
    pub data: Option<CsvData>,
    pub sweep_proportions: Vec<f64>,
    pub export_embeddings: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            stream: StreamConfig::default(),
            network: NetworkShape::default(),
            learner: LearnerConfig::default(),
            n_runs: 5,
            seeds: (1..=5).collect(),
            switches: Switches::FULL,
            output_dir: PathBuf::from("results"),
            data: None,
            sweep_proportions: vec![0.05, 0.10, 0.30],
            export_embeddings: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| LeopardError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LeopardError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            LeopardError::Config(msg) => LeopardError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks every section; all problems are reported as configuration errors.
    pub fn validate(&self) -> Result<()> {
        let as_config = |e: LeopardError| match e {
            LeopardError::InvalidArgument(msg) | LeopardError::InvalidState(msg) => LeopardError::Config(msg),
            other => other,
        };
        if self.n_runs == 0 {
            return Err(LeopardError::Config("n_runs must be >= 1".into()));
        }
        if self.seeds.len() != self.n_runs {
            return Err(LeopardError::Config(format!(
                "seeds lists {} entries but n_runs is {}",
                self.seeds.len(),
                self.n_runs
            )));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(LeopardError::Config("seeds must be distinct".into()));
        }
        if let Some(p) = self.sweep_proportions.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(LeopardError::Config(format!("sweep proportion {p} outside (0, 1]")));
        }
        self.stream.validate().map_err(as_config)?;
        self.learner.validate().map_err(as_config)?;
        self.network
            .model_config(self.stream.source_dim, self.stream.target_dim, self.stream.n_classes)
            .validate()
            .map_err(as_config)
    }

    /// Same experiment restricted to one seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        ExperimentConfig {
            n_runs: 1,
            seeds: vec![seed],
            ..self.clone()
        }
    }
}

/// Named switch settings for the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    /// No structure evolution, no KL term, no domain loss.
    A,
    /// Fixed structure with both extra losses.
    B,
    /// Evolving structure without the extra losses.
    C,
    Full,
}

impl Ablation {
    pub fn switches(self) -> Switches {
        match self {
            Ablation::A => Switches::NONE,
            Ablation::B => Switches {
                structure_learning: false,
                kl_loss: true,
                cd_loss: true,
            },
            Ablation::C => Switches {
                structure_learning: true,
                kl_loss: false,
                cd_loss: false,
            },
            Ablation::Full => Switches::FULL,
        }
    }
}

impl FromStr for Ablation {
    type Err = LeopardError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Ablation::A),
            "B" | "b" => Ok(Ablation::B),
            "C" | "c" => Ok(Ablation::C),
            "full" | "Full" | "FULL" => Ok(Ablation::Full),
            other => Err(LeopardError::Config(format!(
                "unknown ablation {other:?}; expected A, B, C or full"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"n_runs": 1, "seeds": [3], "colour": 1}"#),
            Err(LeopardError::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"n_runs": 2, "seeds": [3]}"#),
            Err(LeopardError::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"learner": {"epochs": 0}}"#),
            Err(LeopardError::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"stream": {"label_proportion": 0.0}}"#),
            Err(LeopardError::Config(_))
        ));
        let partial = ExperimentConfig::from_json(r#"{"n_runs": 1, "seeds": [9]}"#).unwrap();
        assert_eq!(partial.learner, LearnerConfig::default());
    }

    #[test]
    fn ablation_names() {
        assert_eq!("A".parse::<Ablation>().unwrap().switches(), Switches::NONE);
        assert_eq!("full".parse::<Ablation>().unwrap().switches(), Switches::FULL);
        let c = "C".parse::<Ablation>().unwrap().switches();
        assert!(c.structure_learning && !c.kl_loss && !c.cd_loss);
        assert!("D".parse::<Ablation>().is_err());
    }
}
