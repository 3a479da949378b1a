//! Checkpoint file: the 8-byte magic `ADSCKPT1`, a little-endian `u64`
//! header length, a JSON header (config, fingerprint, parameter manifest)
//! and then raw little-endian `f64` data addressed by byte offsets.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AdsError, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParameterStore;
use crate::tensor::DenseValue;

use super::config::ModelConfig;
use super::model::Ranker;

const MAGIC: &[u8; 8] = b"ADSCKPT1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    fingerprint: String,
    step: u64,
    model: ModelConfig,
    params: Vec<Entry>,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    sparse: bool,
    offset: u64,
    /// Byte offsets of the first and second moments.
    moments: Option<[u64; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    config: AdamConfig,
    t: u64,
}

/// Everything restored from a checkpoint file.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub fingerprint: String,
    pub step: u64,
    pub store: ParameterStore,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    /// Rejects the checkpoint unless it was written for `config`'s
    /// architecture.
    pub fn ensure_compatible(&self, config: &ModelConfig) -> Result<()> {
        let expected = config.fingerprint();
        if self.fingerprint != expected {
            return Err(AdsError::Config(format!(
                "checkpoint fingerprint {} does not match config fingerprint {expected}",
                self.fingerprint
            )));
        }
        let fresh = Ranker::new(config.clone())?.init_params()?;
        for (_, p) in fresh.iter() {
            let stored = self.store.value(&p.name).map_err(|_| {
                AdsError::Config(format!("checkpoint is missing parameter {}", p.name))
            })?;
            if stored.shape() != p.value.shape() {
                return Err(AdsError::dim("checkpoint", stored.shape(), p.value.shape()));
            }
        }
        Ok(())
    }
}

pub fn save_checkpoint(
    path: &Path,
    model: &ModelConfig,
    store: &ParameterStore,
    optimizer: Option<&AdamState>,
    step: u64,
) -> Result<()> {
    let mut data: Vec<u8> = Vec::new();
    let mut push = |values: &[f64]| -> u64 {
        let off = data.len() as u64;
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
        off
    };
    let mut params = Vec::with_capacity(store.len());
    for (id, p) in store.iter() {
        let offset = push(p.value.data());
        let moments = optimizer.map(|o| [push(&o.m[id.index()]), push(&o.v[id.index()])]);
        params.push(Entry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            sparse: p.sparse,
            offset,
            moments,
        });
    }
    let header = Header {
        fingerprint: model.fingerprint(),
        step,
        model: model.clone(),
        params,
        optimizer: optimizer.map(|o| OptimizerHeader {
            config: o.config,
            t: o.t,
        }),
    };
    let json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    f.write_all(&data)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let bad = |why: &str| AdsError::Malformed(format!("{}: {why}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize
        .checked_add(len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..body])?;
    let data = &bytes[body..];
    let read = |offset: u64, n: usize| -> Result<Vec<f64>> {
        let start = offset as usize;
        let end = start + n * 8;
        if end > data.len() {
            return Err(bad("truncated data"));
        }
        Ok(data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    };

    let mut store = ParameterStore::new();
    let mut m = Vec::with_capacity(header.params.len());
    let mut v = Vec::with_capacity(header.params.len());
    for e in &header.params {
        let n: usize = e.shape.iter().product();
        let value = DenseValue::new(&e.shape, read(e.offset, n)?)?;
        if e.sparse {
            store.insert_table(&e.name, value)?;
        } else {
            store.insert(&e.name, value)?;
        }
        if let Some([mo, vo]) = e.moments {
            m.push(read(mo, n)?);
            v.push(read(vo, n)?);
        }
    }
    let optimizer = match header.optimizer {
        Some(o) => {
            if m.len() != header.params.len() {
                return Err(bad("optimizer state is incomplete"));
            }
            Some(AdamState {
                config: o.config,
                t: o.t,
                m,
                v,
            })
        }
        None => None,
    };
    if header.fingerprint != header.model.fingerprint() {
        return Err(bad("stored fingerprint does not match the stored config"));
    }
    Ok(Checkpoint {
        model: header.model,
        fingerprint: header.fingerprint,
        step: header.step,
        store,
        optimizer,
    })
}
