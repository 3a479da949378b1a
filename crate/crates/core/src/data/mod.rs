//! Sample records, the synthetic multi-domain generator and JSONL storage.

mod jsonl;
mod record;
mod synth;

use std::fs;
use std::path::Path;

pub use jsonl::{load_jsonl, split_by_user, write_jsonl, JsonlSchema, Loaded, MAX_MALFORMED_FRACTION};
pub use record::{SampleRecord, Splits};
pub use synth::{
    generate, SplitSummary, SynthDataset, SynthManifest, SynthOracle, SynthSpec, STAT_ACTIVITY,
    STAT_POOL_ENTROPY,
};

use crate::error::Result;

pub const SPLIT_FILES: [&str; 3] = ["train.jsonl", "val.jsonl", "test.jsonl"];
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes the three splits and the manifest into `dir`.
pub fn write_dataset(dir: &Path, dataset: &SynthDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let s = &dataset.splits;
    for (name, records) in SPLIT_FILES.iter().zip([&s.train, &s.val, &s.test]) {
        write_jsonl(&dir.join(name), records)?;
    }
    let manifest = serde_json::to_string_pretty(&dataset.manifest)?;
    fs::write(dir.join(MANIFEST_FILE), manifest + "\n")?;
    Ok(())
}

/// Reads a directory produced by [`write_dataset`].
pub fn load_dataset_dir(dir: &Path, schema: &JsonlSchema, max_seq_len: Option<usize>) -> Result<Splits> {
    let mut parts = Vec::with_capacity(3);
    for name in SPLIT_FILES {
        parts.push(load_jsonl(&dir.join(name), schema, max_seq_len)?.records);
    }
    let test = parts.pop().unwrap_or_default();
    let val = parts.pop().unwrap_or_default();
    let train = parts.pop().unwrap_or_default();
    Ok(Splits { train, val, test })
}
