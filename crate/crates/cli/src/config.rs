//! Experiment configuration documents.

use std::fs;
use std::path::{Path, PathBuf};

use ads_core::data::{generate, load_dataset_dir, load_jsonl, split_by_user, JsonlSchema, Splits, SynthSpec};
use ads_core::ranker::ModelConfig;
use ads_core::train::TrainConfig;
use ads_core::{AdsError, Result};
use serde::{Deserialize, Serialize};

fn default_ablation_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

/// Where samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Generated in memory from a synthetic spec.
    Synthetic {
        #[serde(default)]
        spec: SynthSpec,
    },
    /// A directory holding `train.jsonl`, `val.jsonl` and `test.jsonl`.
    Dir {
        path: PathBuf,
        #[serde(default)]
        schema: JsonlSchema,
    },
    /// One JSONL file split 80/10/10 by user.
    Jsonl {
        path: PathBuf,
        #[serde(default)]
        schema: JsonlSchema,
        #[serde(default)]
        split_seed: u64,
    },
}

/// Complete description of one experiment. Missing `model` and `training`
/// sections are filled from the synthetic spec's presets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: Option<ModelConfig>,
    pub data: DataConfig,
    #[serde(default)]
    pub training: Option<TrainConfig>,
    pub output_dir: PathBuf,
    /// Model initialization and shuffling seed.
    #[serde(default)]
    pub seed: u64,
    /// Seeds used by the ablation command.
    #[serde(default = "default_ablation_seeds")]
    pub ablation_seeds: Vec<u64>,
}

/// A run configuration with every default made explicit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resolved {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub training: TrainConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub ablation_seeds: Vec<u64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| AdsError::Config(format!("{}: {e}", path.display())))
    }

    pub fn resolve(self) -> Result<Resolved> {
        let model = match (self.model, &self.data) {
            (Some(m), _) => m,
            (None, DataConfig::Synthetic { spec }) => ModelConfig::for_synth(spec),
            (None, _) => return Err(AdsError::Config("model is required for file-based data".into())),
        };
        let training = match (self.training, &self.data) {
            (Some(t), _) => t,
            (None, DataConfig::Synthetic { .. }) => TrainConfig::for_synth(),
            (None, _) => TrainConfig::default(),
        };
        let resolved = Resolved {
            model: ModelConfig {
                seed: self.seed,
                ..model
            },
            data: self.data,
            training,
            output_dir: self.output_dir,
            seed: self.seed,
            ablation_seeds: self.ablation_seeds,
        };
        resolved.validate()?;
        Ok(resolved)
    }
}

impl Resolved {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        if let DataConfig::Synthetic { spec } = &self.data {
            spec.validate()?;
        }
        if self.ablation_seeds.is_empty() {
            return Err(AdsError::Config("ablation_seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn load_splits(&self) -> Result<Splits> {
        let t = Some(self.model.seq_len);
        match &self.data {
            DataConfig::Synthetic { spec } => Ok(generate(spec)?.splits),
            DataConfig::Dir { path, schema } => load_dataset_dir(path, schema, t),
            DataConfig::Jsonl {
                path,
                schema,
                split_seed,
            } => Ok(split_by_user(load_jsonl(path, schema, t)?.records, *split_seed)),
        }
    }

    /// Number of domains for report columns.
    pub fn num_domains(&self, splits: &Splits) -> usize {
        match &self.data {
            DataConfig::Synthetic { spec } => spec.num_domains,
            _ => splits
                .train
                .iter()
                .chain(&splits.val)
                .chain(&splits.test)
                .map(|r| r.domain + 1)
                .max()
                .unwrap_or(0),
        }
    }

    /// Creates the output directory and records the resolved config in it.
    pub fn prepare_output(&self) -> Result<()> {
        fs::create_dir_all(self.output_dir.join("metrics"))?;
        fs::write(
            self.output_dir.join("config.resolved.json"),
            serde_json::to_string_pretty(self)?,
        )?;
        Ok(())
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output_dir.join("checkpoints")
    }

    pub fn metrics_dir(&self) -> PathBuf {
        self.output_dir.join("metrics")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_synthetic_config_resolves() {
        let c: RunConfig = serde_json::from_str(r#"{"data":{"kind":"synthetic"},"output_dir":"out","seed":4}"#).unwrap();
        let r = c.resolve().unwrap();
        assert_eq!(r.model.seed, 4);
        assert_eq!(r.training, TrainConfig::for_synth());
        let back: Resolved = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"data":{"kind":"synthetic"},"output_dir":"o","sed":1}"#).is_err());
        assert!(
            serde_json::from_str::<RunConfig>(r#"{"data":{"kind":"synthetic","spek":{}},"output_dir":"o"}"#).is_err()
        );
    }

    #[test]
    fn file_data_needs_a_model() {
        let c: RunConfig = serde_json::from_str(r#"{"data":{"kind":"dir","path":"d"},"output_dir":"o"}"#).unwrap();
        assert!(matches!(c.resolve(), Err(AdsError::Config(_))));
    }
}
