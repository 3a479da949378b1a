//! One JSON object per line, with configurable field names.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{AdsError, Result};

use super::record::{SampleRecord, Splits};

/// Malformed lines beyond this fraction abort the load.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

/// Source field names for each record attribute.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JsonlSchema {
    pub domain: String,
    pub stats: String,
    pub seq: String,
    pub cand: String,
    pub user: String,
    pub side: String,
    pub label: String,
}

impl Default for JsonlSchema {
    fn default() -> Self {
        Self {
            domain: "domain".into(),
            stats: "stats".into(),
            seq: "seq".into(),
            cand: "cand".into(),
            user: "user".into(),
            side: "side".into(),
            label: "label".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Loaded {
    pub records: Vec<SampleRecord>,
    pub lines: usize,
    /// 1-based line numbers that failed validation.
    pub malformed: Vec<usize>,
}

pub fn write_jsonl(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn parse_line(line: &str, schema: &JsonlSchema) -> std::result::Result<SampleRecord, String> {
    let v: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obj = v.as_object().ok_or("not an object")?;
    let id = |name: &str| -> std::result::Result<usize, String> {
        let x = obj.get(name).ok_or_else(|| format!("missing {name}"))?;
        x.as_u64()
            .map(|n| n as usize)
            .ok_or_else(|| format!("{name} is not a non-negative integer"))
    };
    let ids = |name: &str, required: bool| -> std::result::Result<Vec<usize>, String> {
        match obj.get(name) {
            None if !required => Ok(Vec::new()),
            None => Err(format!("missing {name}")),
            Some(Value::Array(a)) => a
                .iter()
                .map(|x| x.as_u64().map(|n| n as usize).ok_or_else(|| format!("{name} holds a non-id")))
                .collect(),
            Some(_) => Err(format!("{name} is not a list")),
        }
    };
    let stats = match obj.get(&schema.stats) {
        None => Vec::new(),
        Some(Value::Array(a)) => a
            .iter()
            .map(|x| x.as_f64().filter(|f| f.is_finite()).ok_or("stats holds a non-number"))
            .collect::<std::result::Result<_, _>>()?,
        Some(_) => return Err("stats is not a list".into()),
    };
    let label = id(&schema.label)?;
    if label > 1 {
        return Err(format!("label {label} is not 0 or 1"));
    }
    Ok(SampleRecord {
        domain: id(&schema.domain)?,
        stats,
        seq: ids(&schema.seq, true)?,
        cand: id(&schema.cand)?,
        user: id(&schema.user)?,
        side: ids(&schema.side, false)?,
        label: label as u8,
    })
}

/// Reads and validates every line; sequences longer than `max_seq_len`
/// keep their most recent items. Blank lines are skipped.
pub fn load_jsonl(path: &Path, schema: &JsonlSchema, max_seq_len: Option<usize>) -> Result<Loaded> {
    let text = fs::read_to_string(path)?;
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l))
        .collect();
    if lines.is_empty() {
        log::warn!("{} holds no records", path.display());
        return Ok(Loaded {
            records: Vec::new(),
            lines: 0,
            malformed: Vec::new(),
        });
    }
    let parsed: Vec<(usize, std::result::Result<SampleRecord, String>)> = lines
        .par_iter()
        .map(|&(n, l)| (n, parse_line(l, schema)))
        .collect();
    let mut records = Vec::with_capacity(parsed.len());
    let mut malformed = Vec::new();
    for (n, r) in parsed {
        match r {
            Ok(mut rec) => {
                if let Some(t) = max_seq_len {
                    if rec.seq.len() > t {
                        rec.seq.drain(..rec.seq.len() - t);
                    }
                }
                records.push(rec)
            }
            Err(why) => {
                log::debug!("{}:{n}: {why}", path.display());
                malformed.push(n);
            }
        }
    }
    let total = lines.len();
    if !malformed.is_empty() {
        log::warn!("{}: {} of {total} lines malformed", path.display(), malformed.len());
    }
    if malformed.len() as f64 > MAX_MALFORMED_FRACTION * total as f64 {
        return Err(AdsError::Malformed(format!(
            "{}: {} of {total} lines malformed (first at line {})",
            path.display(),
            malformed.len(),
            malformed[0]
        )));
    }
    Ok(Loaded {
        records,
        lines: total,
        malformed,
    })
}

/// Assigns whole users to train/validation/test in 80/10/10 proportion,
/// keeping record order within each split.
pub fn split_by_user(records: Vec<SampleRecord>, seed: u64) -> Splits {
    let mut users: Vec<usize> = records
        .iter()
        .map(|r| r.user)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    users.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = users.len() * 8 / 10;
    let n_val = users.len() / 10;
    let val: BTreeSet<usize> = users[n_train..n_train + n_val].iter().copied().collect();
    let test: BTreeSet<usize> = users[n_train + n_val..].iter().copied().collect();
    let mut splits = Splits::default();
    for r in records {
        if test.contains(&r.user) {
            splits.test.push(r);
        } else if val.contains(&r.user) {
            splits.val.push(r);
        } else {
            splits.train.push(r);
        }
    }
    splits
}
