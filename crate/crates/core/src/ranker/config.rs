use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::Backbone;
use crate::error::{AdsError, Result};
use crate::data::{SynthSpec, STAT_ACTIVITY, STAT_POOL_ENTROPY};
use crate::features::{BucketField, CategoricalField, DomainFeatureSpec, FeatureSpec, FieldSource};
use crate::tensor::Precision;

/// Which personalization modules are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Queries are the candidate embedding repeated over positions.
    NoPcrg,
    /// Additionally the raw sequence embeddings are attended.
    NoPcrgPsrg,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::NoPcrg, Ablation::NoPcrgPsrg];

    pub fn uses_psrg(self) -> bool {
        self != Ablation::NoPcrgPsrg
    }

    pub fn uses_pcrg(self) -> bool {
        self == Ablation::Full
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoPcrg => "no_pcrg",
            Ablation::NoPcrgPsrg => "no_pcrg_psrg",
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_mlp() -> Vec<usize> {
    vec![64, 32, 1]
}

fn default_eta() -> f64 {
    2.0
}

/// Every dimension and switch of the ranker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Sequence length `T` after padding/truncation.
    pub seq_len: usize,
    /// Number of query chunks `G`; must divide `seq_len`.
    pub chunks: usize,
    /// Sequence item embedding width `d_S`.
    pub seq_dim: usize,
    /// Candidate embedding width `d_Q`.
    pub cand_dim: usize,
    /// Hidden width `d_h` of the generator networks and the scoring MLP.
    pub gen_hidden: usize,
    /// Per-head attention width `d_A`.
    pub attn_dim: usize,
    pub heads: usize,
    /// Prediction head widths; the last must be 1.
    #[serde(default = "default_mlp")]
    pub mlp: Vec<usize>,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default)]
    pub backbone: Backbone,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub precision: Precision,
    /// Initialization seed.
    #[serde(default)]
    pub seed: u64,
    pub features: FeatureSpec,
}

impl ModelConfig {
    /// Small configuration used for gradient checks and quick tests:
    /// `B=2, T=4, G=2, d_S=d_Q=d_D=4, d_h=3, d_A=4, H=2`.
    pub fn tiny() -> Self {
        Self {
            seq_len: 4,
            chunks: 2,
            seq_dim: 4,
            cand_dim: 4,
            gen_hidden: 3,
            attn_dim: 4,
            heads: 2,
            mlp: vec![5, 3, 1],
            eta: 2.0,
            backbone: Backbone::Mha,
            ablation: Ablation::Full,
            precision: Precision::F64,
            seed: 0,
            features: FeatureSpec {
                item_vocab: 12,
                user_vocab: 6,
                user_dim: 2,
                domain: DomainFeatureSpec {
                    explicit: vec![CategoricalField {
                        name: "domain".into(),
                        source: FieldSource::Domain,
                        vocab: 3,
                        dim: 2,
                    }],
                    implicit: vec![BucketField {
                        name: "activity".into(),
                        stat: 0,
                        boundaries: vec![2.0, 5.0],
                        dim: 2,
                    }],
                },
                other: vec![CategoricalField {
                    name: "context".into(),
                    source: FieldSource::Side(0),
                    vocab: 4,
                    dim: 2,
                }],
            },
        }
    }

    /// Default architecture for data from the synthetic generator: the
    /// domain id as the explicit indicator, pool entropy and activity as
    /// bucketized implicit indicators, the context id as the other field.
    pub fn for_synth(spec: &SynthSpec) -> Self {
        Self {
            seq_len: spec.seq_len,
            chunks: spec.seq_len,
            seq_dim: 16,
            cand_dim: 16,
            gen_hidden: 32,
            attn_dim: 16,
            heads: 2,
            mlp: default_mlp(),
            eta: 2.0,
            backbone: Backbone::Mha,
            ablation: Ablation::Full,
            precision: Precision::F64,
            seed: 0,
            features: FeatureSpec {
                item_vocab: spec.num_items + 1,
                user_vocab: spec.num_users,
                user_dim: 8,
                domain: DomainFeatureSpec {
                    explicit: vec![CategoricalField {
                        name: "domain".into(),
                        source: FieldSource::Domain,
                        vocab: spec.num_domains,
                        dim: 8,
                    }],
                    implicit: vec![
                        BucketField {
                            name: "pool_entropy".into(),
                            stat: STAT_POOL_ENTROPY,
                            boundaries: vec![0.2, 0.4, 0.6, 0.8, 1.0],
                            dim: 4,
                        },
                        BucketField {
                            name: "activity".into(),
                            stat: STAT_ACTIVITY,
                            boundaries: vec![2.0, 4.0, 8.0, 16.0, 32.0, 64.0],
                            dim: 4,
                        },
                    ],
                },
                other: vec![CategoricalField {
                    name: "context".into(),
                    source: FieldSource::Side(0),
                    vocab: spec.num_contexts,
                    dim: 4,
                }],
            },
        }
    }

    pub fn domain_dim(&self) -> usize {
        self.features.domain.dim()
    }

    pub fn items_per_chunk(&self) -> usize {
        self.seq_len / self.chunks.max(1)
    }

    pub fn with_ablation(&self, ablation: Ablation) -> Self {
        Self {
            ablation,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("seq_len", self.seq_len),
            ("chunks", self.chunks),
            ("seq_dim", self.seq_dim),
            ("cand_dim", self.cand_dim),
            ("gen_hidden", self.gen_hidden),
            ("attn_dim", self.attn_dim),
            ("heads", self.heads),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(AdsError::Config(format!("model.{name} must be positive")));
        }
        if !self.seq_len.is_multiple_of(self.chunks) {
            return Err(AdsError::Config(format!(
                "model.chunks = {} does not divide model.seq_len = {}",
                self.chunks, self.seq_len
            )));
        }
        if self.mlp.last() != Some(&1) || self.mlp.contains(&0) {
            return Err(AdsError::Config(format!(
                "model.mlp must be positive widths ending in 1, got {:?}",
                self.mlp
            )));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(AdsError::Config(format!("model.eta must be positive, got {}", self.eta)));
        }
        self.features.validate()
    }

    /// Hash of the architecture (everything except the init seed); a
    /// checkpoint can only be used with a config sharing it.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        let json = serde_json::to_vec(&c).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_is_valid() {
        let c = ModelConfig::tiny();
        c.validate().unwrap();
        assert_eq!(c.domain_dim(), 4);
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = ModelConfig::tiny();
        c.chunks = 3;
        assert!(c.validate().unwrap_err().to_string().contains("chunks"));
        let mut c = ModelConfig::tiny();
        c.mlp = vec![4, 2];
        assert!(c.validate().unwrap_err().to_string().contains("mlp"));
        let mut c = ModelConfig::tiny();
        c.heads = 0;
        assert!(c.validate().unwrap_err().to_string().contains("heads"));
    }

    #[test]
    fn fingerprint_ignores_seed_only() {
        let a = ModelConfig::tiny();
        let mut b = a.clone();
        b.seed = 99;
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.chunks = 4;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), a.with_ablation(Ablation::NoPcrg).fingerprint());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = serde_json::to_value(ModelConfig::tiny()).unwrap();
        v["surprise"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ModelConfig>(v).is_err());
    }
}
