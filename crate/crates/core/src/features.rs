//! Embedding tables and the preprocessing that turns raw records into the
//! dense inputs of the ranker: domain features, the behavior sequence, the
//! candidate, the user and the remaining context fields.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SampleRecord;
use crate::error::{AdsError, Result};
use crate::params::ParameterStore;
use crate::tensor::{DenseValue, Graph, Var};

/// Reserved sequence id for padding positions.
pub const PADDING_ID: usize = 0;

/// Where a categorical field reads its id from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldSource {
    Domain,
    Side(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoricalField {
    pub name: String,
    pub source: FieldSource,
    pub vocab: usize,
    pub dim: usize,
}

/// A continuous statistic, bucketized and then embedded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BucketField {
    pub name: String,
    /// Index into [`SampleRecord::stats`].
    pub stat: usize,
    pub boundaries: Vec<f64>,
    pub dim: usize,
}

/// Explicit and implicit domain indicators; their embeddings concatenate
/// into the domain feature vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainFeatureSpec {
    pub explicit: Vec<CategoricalField>,
    #[serde(default)]
    pub implicit: Vec<BucketField>,
}

impl DomainFeatureSpec {
    pub fn dim(&self) -> usize {
        self.explicit.iter().map(|f| f.dim).sum::<usize>()
            + self.implicit.iter().map(|f| f.dim).sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    /// Item vocabulary including the padding row 0.
    pub item_vocab: usize,
    pub user_vocab: usize,
    pub user_dim: usize,
    pub domain: DomainFeatureSpec,
    /// Context fields embedded into the "other" block.
    #[serde(default)]
    pub other: Vec<CategoricalField>,
}

impl FeatureSpec {
    pub fn other_dim(&self) -> usize {
        self.other.iter().map(|f| f.dim).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.item_vocab < 2 || self.user_vocab == 0 || self.user_dim == 0 {
            return Err(AdsError::Config(
                "item_vocab must be ≥ 2 (row 0 is padding); user_vocab and user_dim must be positive"
                    .into(),
            ));
        }
        if self.domain.explicit.is_empty() && self.domain.implicit.is_empty() {
            return Err(AdsError::Config("at least one domain feature is required".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for f in self.domain.explicit.iter().chain(&self.other) {
            if f.vocab == 0 || f.dim == 0 {
                return Err(AdsError::Config(format!("field {} needs vocab and dim", f.name)));
            }
            if !names.insert(f.name.as_str()) {
                return Err(AdsError::Config(format!("duplicate field name {}", f.name)));
            }
        }
        for f in &self.domain.implicit {
            if f.dim == 0 || !names.insert(f.name.as_str()) {
                return Err(AdsError::Config(format!("bad bucket field {}", f.name)));
            }
            Bucketizer::new(f.boundaries.clone())?;
        }
        Ok(())
    }
}

/// Monotone mapping from reals to `n + 1` buckets.
#[derive(Clone, Debug, PartialEq)]
pub struct Bucketizer {
    boundaries: Vec<f64>,
}

impl Bucketizer {
    pub fn new(boundaries: Vec<f64>) -> Result<Self> {
        if boundaries.iter().any(|b| !b.is_finite()) {
            return Err(AdsError::Config("bucket boundaries must be finite".into()));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AdsError::Config(format!(
                "bucket boundaries must be strictly increasing: {boundaries:?}"
            )));
        }
        Ok(Self { boundaries })
    }

    pub fn num_buckets(&self) -> usize {
        self.boundaries.len() + 1
    }

    /// Right-closed buckets: `x ≤ b₁ → 0`, `bᵢ < x ≤ bᵢ₊₁ → i`, `x > bₙ → n`.
    pub fn bucketize(&self, x: f64) -> Result<usize> {
        if x.is_nan() {
            return Err(AdsError::Validation("cannot bucketize NaN".into()));
        }
        Ok(self.boundaries.partition_point(|&b| b < x))
    }
}

/// Folds an id into `[0, vocab)`; negative ids are rejected.
pub fn fold_id(id: i64, vocab: usize) -> Result<usize> {
    if id < 0 {
        return Err(AdsError::Validation(format!("negative id {id}")));
    }
    Ok(id as usize % vocab)
}

/// Looks up one row of a table with out-of-vocabulary folding.
pub fn lookup(g: &mut Graph, table: &str, id: i64) -> Result<Var> {
    let vocab = g.stored(table)?.shape()[0];
    let row = fold_id(id, vocab)?;
    let v = g.gather(table, &[row])?;
    let dim = g.shape(v)[1];
    g.reshape(v, &[dim])
}

/// Uniform `[-1/√dim, 1/√dim]` table.
pub fn init_table<R: Rng>(rng: &mut R, vocab: usize, dim: usize) -> DenseValue {
    crate::nn::uniform(rng, &[vocab, dim], dim)
}

pub fn domain_table(name: &str) -> String {
    format!("emb.domain.{name}")
}

pub fn other_table(name: &str) -> String {
    format!("emb.other.{name}")
}

pub const USER_TABLE: &str = "emb.user";

/// Ids and masks for a batch, ready for table lookups.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch {
    pub size: usize,
    pub seq_len: usize,
    /// One id column per domain field, explicit fields first.
    pub domain_ids: Vec<Vec<usize>>,
    /// `size × seq_len`, padded with [`PADDING_ID`].
    pub seq_ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub cand: Vec<usize>,
    pub user: Vec<usize>,
    pub other_ids: Vec<Vec<usize>>,
    pub labels: Vec<f64>,
    pub domains: Vec<usize>,
}

/// Graph handles for the embedded batch.
#[derive(Clone, Copy, Debug)]
pub struct Embedded {
    /// `[B, d_D]`
    pub domain: Var,
    /// `[B, T, d_S]`
    pub seq: Var,
    /// `[B, d_Q]`
    pub cand: Var,
    /// `[B, d_U]`
    pub user: Var,
    /// `[B, d_O]`, absent when no context fields are configured.
    pub other: Option<Var>,
}

/// Concrete embeddings of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleEmbedding {
    pub domain: DenseValue,
    pub seq: DenseValue,
    pub mask: Vec<bool>,
    pub cand: DenseValue,
    pub user: DenseValue,
    pub item: DenseValue,
    pub other: Option<DenseValue>,
}

/// Turns records into ids and ids into embeddings for a fixed layout.
#[derive(Clone, Debug)]
pub struct FeatureEncoder {
    spec: FeatureSpec,
    bucketizers: Vec<Bucketizer>,
    seq_len: usize,
    seq_dim: usize,
    cand_dim: usize,
}

impl FeatureEncoder {
    pub fn new(spec: FeatureSpec, seq_len: usize, seq_dim: usize, cand_dim: usize) -> Result<Self> {
        spec.validate()?;
        if seq_len == 0 || seq_dim == 0 || cand_dim == 0 {
            return Err(AdsError::Config("sequence length and item dims must be positive".into()));
        }
        let bucketizers = spec
            .domain
            .implicit
            .iter()
            .map(|f| Bucketizer::new(f.boundaries.clone()))
            .collect::<Result<_>>()?;
        Ok(Self {
            spec,
            bucketizers,
            seq_len,
            seq_dim,
            cand_dim,
        })
    }

    pub fn spec(&self) -> &FeatureSpec {
        &self.spec
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn domain_dim(&self) -> usize {
        self.spec.domain.dim()
    }

    /// Sequence items and candidates share one table when their dims agree.
    pub fn shares_item_table(&self) -> bool {
        self.seq_dim == self.cand_dim
    }

    pub fn seq_table(&self) -> &'static str {
        if self.shares_item_table() {
            "emb.item"
        } else {
            "emb.item_seq"
        }
    }

    pub fn cand_table(&self) -> &'static str {
        if self.shares_item_table() {
            "emb.item"
        } else {
            "emb.item_cand"
        }
    }

    /// Adds every embedding table to the store.
    pub fn register<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        let s = &self.spec;
        store.insert_table(self.seq_table(), init_table(rng, s.item_vocab, self.seq_dim))?;
        if !self.shares_item_table() {
            store.insert_table(self.cand_table(), init_table(rng, s.item_vocab, self.cand_dim))?;
        }
        store.insert_table(USER_TABLE, init_table(rng, s.user_vocab, s.user_dim))?;
        for f in &s.domain.explicit {
            store.insert_table(&domain_table(&f.name), init_table(rng, f.vocab, f.dim))?;
        }
        for (f, b) in s.domain.implicit.iter().zip(&self.bucketizers) {
            store.insert_table(&domain_table(&f.name), init_table(rng, b.num_buckets(), f.dim))?;
        }
        for f in &s.other {
            store.insert_table(&other_table(&f.name), init_table(rng, f.vocab, f.dim))?;
        }
        Ok(())
    }

    /// Number of scalars across all tables.
    pub fn table_params(&self) -> usize {
        let s = &self.spec;
        let items = s.item_vocab
            * if self.shares_item_table() {
                self.seq_dim
            } else {
                self.seq_dim + self.cand_dim
            };
        items
            + s.user_vocab * s.user_dim
            + s.domain.explicit.iter().map(|f| f.vocab * f.dim).sum::<usize>()
            + s.domain
                .implicit
                .iter()
                .map(|f| (f.boundaries.len() + 1) * f.dim)
                .sum::<usize>()
            + s.other.iter().map(|f| f.vocab * f.dim).sum::<usize>()
    }

    fn categorical(&self, f: &CategoricalField, r: &SampleRecord) -> Result<usize> {
        let raw = match f.source {
            FieldSource::Domain => r.domain,
            FieldSource::Side(i) => *r.side.get(i).ok_or_else(|| {
                AdsError::Validation(format!("sample is missing declared field {}", f.name))
            })?,
        };
        Ok(raw % f.vocab)
    }

    /// Pads or truncates the sequence to exactly `T` (keeping the most
    /// recent items) and resolves every field to a table row.
    pub fn encode(&self, records: &[SampleRecord]) -> Result<EncodedBatch> {
        if records.is_empty() {
            return Err(AdsError::Validation("empty batch".into()));
        }
        let s = &self.spec;
        let t = self.seq_len;
        let n_domain = s.domain.explicit.len() + s.domain.implicit.len();
        let mut out = EncodedBatch {
            size: records.len(),
            seq_len: t,
            domain_ids: vec![Vec::with_capacity(records.len()); n_domain],
            seq_ids: Vec::with_capacity(records.len() * t),
            mask: Vec::with_capacity(records.len() * t),
            cand: Vec::with_capacity(records.len()),
            user: Vec::with_capacity(records.len()),
            other_ids: vec![Vec::with_capacity(records.len()); s.other.len()],
            labels: Vec::with_capacity(records.len()),
            domains: Vec::with_capacity(records.len()),
        };
        for r in records {
            for (k, f) in s.domain.explicit.iter().enumerate() {
                out.domain_ids[k].push(self.categorical(f, r)?);
            }
            for (k, (f, b)) in s.domain.implicit.iter().zip(&self.bucketizers).enumerate() {
                let x = *r.stats.get(f.stat).ok_or_else(|| {
                    AdsError::Validation(format!("sample is missing declared field {}", f.name))
                })?;
                out.domain_ids[s.domain.explicit.len() + k].push(b.bucketize(x)?);
            }
            let keep = r.seq.len().min(t);
            let recent = &r.seq[r.seq.len() - keep..];
            for &id in recent {
                out.seq_ids.push(id % s.item_vocab);
                out.mask.push(true);
            }
            for _ in keep..t {
                out.seq_ids.push(PADDING_ID);
                out.mask.push(false);
            }
            out.cand.push(r.cand % s.item_vocab);
            out.user.push(r.user % s.user_vocab);
            for (k, f) in s.other.iter().enumerate() {
                out.other_ids[k].push(self.categorical(f, r)?);
            }
            if r.label > 1 {
                return Err(AdsError::Validation(format!("label {} is not 0 or 1", r.label)));
            }
            out.labels.push(r.label as f64);
            out.domains.push(r.domain);
        }
        Ok(out)
    }

    /// Looks every id up, concatenating per-field embeddings in declared order.
    pub fn embed(&self, g: &mut Graph, batch: &EncodedBatch) -> Result<Embedded> {
        let s = &self.spec;
        let b = batch.size;
        let names: Vec<String> = s
            .domain
            .explicit
            .iter()
            .map(|f| domain_table(&f.name))
            .chain(s.domain.implicit.iter().map(|f| domain_table(&f.name)))
            .collect();
        let mut parts = Vec::with_capacity(names.len());
        for (name, ids) in names.iter().zip(&batch.domain_ids) {
            parts.push(g.gather(name, ids)?);
        }
        let domain = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(&parts)?
        };

        let seq = g.gather(self.seq_table(), &batch.seq_ids)?;
        let seq = g.reshape(seq, &[b, batch.seq_len, self.seq_dim])?;
        let cand = g.gather(self.cand_table(), &batch.cand)?;
        let user = g.gather(USER_TABLE, &batch.user)?;

        let other = if s.other.is_empty() {
            None
        } else {
            let mut parts = Vec::with_capacity(s.other.len());
            for (f, ids) in s.other.iter().zip(&batch.other_ids) {
                parts.push(g.gather(&other_table(&f.name), ids)?);
            }
            Some(if parts.len() == 1 {
                parts[0]
            } else {
                g.concat(&parts)?
            })
        };
        Ok(Embedded {
            domain,
            seq,
            cand,
            user,
            other,
        })
    }

    /// Embeds one record into concrete values.
    pub fn embed_sample(&self, store: &ParameterStore, record: &SampleRecord) -> Result<SampleEmbedding> {
        let batch = self.encode(std::slice::from_ref(record))?;
        let mut g = Graph::with_store(store, crate::tensor::Precision::F64);
        let e = self.embed(&mut g, &batch)?;
        let squeeze = |g: &Graph, v: Var| {
            let val = g.value(v);
            val.reshaped(&val.shape()[1..]).expect("drop batch axis")
        };
        Ok(SampleEmbedding {
            domain: squeeze(&g, e.domain),
            seq: squeeze(&g, e.seq),
            mask: batch.mask,
            cand: squeeze(&g, e.cand),
            user: squeeze(&g, e.user),
            item: squeeze(&g, e.cand),
            other: e.other.map(|o| squeeze(&g, o)),
        })
    }
}
