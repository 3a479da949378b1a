//! Scalar-loop reference evaluation of the ranker, written independently of
//! the batched graph: every product is an explicit loop over indices.

#![allow(dead_code)]

use ads_core::attention::{Backbone, KEY_PROJ, QUERY_PROJ, VALUE_PROJ};
use ads_core::data::SampleRecord;
use ads_core::features::{domain_table, other_table, FieldSource, USER_TABLE};
use ads_core::ranker::ModelConfig;
use ads_core::tensor::MASK_SENTINEL;
use ads_core::ParameterStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct RefInputs {
    pub domain: Vec<f64>,
    pub seq: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
    pub cand: Vec<f64>,
    pub user: Vec<f64>,
    pub other: Vec<f64>,
}

pub struct RefOutput {
    pub seq: Vec<Vec<f64>>,
    pub queries: Vec<Vec<f64>>,
    /// Raw logits per head and position.
    pub logits: Vec<Vec<f64>>,
    pub pooled: Vec<f64>,
    pub logit: f64,
    pub prob: f64,
}

fn p<'a>(store: &'a ParameterStore, name: &str) -> &'a [f64] {
    store.value(name).unwrap().data()
}

fn row(store: &ParameterStore, table: &str, i: usize) -> Vec<f64> {
    let t = store.value(table).unwrap();
    let d = t.shape()[1];
    t.data()[i * d..(i + 1) * d].to_vec()
}

/// `w: [out × in]` row-major.
pub fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..b.len())
        .map(|o| {
            let mut acc = 0.0;
            for i in 0..n {
                acc += w[o * n + i] * x[i];
            }
            acc + b[o]
        })
        .collect()
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| if x > 0.0 { x } else { 0.0 }).collect()
}

fn sigm(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn seq_tables(cfg: &ModelConfig) -> (&'static str, &'static str) {
    if cfg.seq_dim == cfg.cand_dim {
        ("emb.item", "emb.item")
    } else {
        ("emb.item_seq", "emb.item_cand")
    }
}

pub fn embed(cfg: &ModelConfig, store: &ParameterStore, r: &SampleRecord) -> RefInputs {
    let f = &cfg.features;
    let source = |s: FieldSource| match s {
        FieldSource::Domain => r.domain,
        FieldSource::Side(i) => r.side[i],
    };
    let mut domain = Vec::new();
    for field in &f.domain.explicit {
        domain.extend(row(store, &domain_table(&field.name), source(field.source) % field.vocab));
    }
    for field in &f.domain.implicit {
        let x = r.stats[field.stat];
        let bucket = field.boundaries.iter().filter(|&&b| b < x).count();
        domain.extend(row(store, &domain_table(&field.name), bucket));
    }
    let (seq_t, cand_t) = seq_tables(cfg);
    let t = cfg.seq_len;
    let start = r.seq.len().saturating_sub(t);
    let kept = &r.seq[start..];
    let mut seq = Vec::new();
    let mut mask = Vec::new();
    for i in 0..t {
        if i < kept.len() {
            seq.push(row(store, seq_t, kept[i] % f.item_vocab));
            mask.push(true);
        } else {
            seq.push(row(store, seq_t, 0));
            mask.push(false);
        }
    }
    let mut other = Vec::new();
    for field in &f.other {
        other.extend(row(store, &other_table(&field.name), source(field.source) % field.vocab));
    }
    RefInputs {
        domain,
        seq,
        mask,
        cand: row(store, cand_t, r.cand % f.item_vocab),
        user: row(store, USER_TABLE, r.user % f.user_vocab),
        other,
    }
}

pub fn psrg(cfg: &ModelConfig, store: &ParameterStore, e_d: &[f64], seq: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = cfg.seq_dim;
    let h = relu(affine(p(store, "psrg.weight_gen.0.w"), p(store, "psrg.weight_gen.0.b"), e_d));
    let private = affine(p(store, "psrg.weight_gen.1.w"), p(store, "psrg.weight_gen.1.b"), &h);
    let shared = p(store, "psrg.w_shared");
    let w: Vec<f64> = (0..d * d).map(|i| cfg.eta * (shared[i] * sigm(private[i]))).collect();
    let hb = relu(affine(p(store, "psrg.bias_gen.0.w"), p(store, "psrg.bias_gen.0.b"), e_d));
    let b = affine(p(store, "psrg.bias_gen.1.w"), p(store, "psrg.bias_gen.1.b"), &hb);
    seq.iter()
        .map(|x| {
            (0..d)
                .map(|i| {
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += x[j] * w[i * d + j];
                    }
                    acc + b[i]
                })
                .collect()
        })
        .collect()
}

pub fn pcrg(cfg: &ModelConfig, store: &ParameterStore, e_d: &[f64], e_q: &[f64]) -> Vec<Vec<f64>> {
    let x: Vec<f64> = e_d.iter().chain(e_q).copied().collect();
    let h = relu(affine(p(store, "pcrg.query_gen.0.w"), p(store, "pcrg.query_gen.0.b"), &x));
    let private = affine(p(store, "pcrg.query_gen.1.w"), p(store, "pcrg.query_gen.1.b"), &h);
    let per = cfg.seq_len / cfg.chunks;
    let dq = cfg.cand_dim;
    (0..cfg.seq_len)
        .map(|t| (0..dq).map(|a| private[(t / per) * dq + a] + e_q[a]).collect())
        .collect()
}

/// Rows `h·d_A..(h+1)·d_A` of a stacked projection applied to `x`.
fn project(w: &[f64], head: usize, d_a: usize, x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..d_a)
        .map(|a| {
            let r = head * d_a + a;
            let mut acc = 0.0;
            for i in 0..n {
                acc += w[r * n + i] * x[i];
            }
            acc
        })
        .collect()
}

/// Returns per-head raw logits and the concatenated pooled output.
pub fn attend(
    cfg: &ModelConfig,
    store: &ParameterStore,
    queries: &[Vec<f64>],
    seq: &[Vec<f64>],
    mask: &[bool],
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let d_a = cfg.attn_dim;
    let heads = if cfg.backbone == Backbone::Din { 1 } else { cfg.heads };
    let (wq, wk, wv) = (p(store, QUERY_PROJ), p(store, KEY_PROJ), p(store, VALUE_PROJ));
    let mut all_logits = Vec::new();
    let mut pooled = Vec::new();
    for h in 0..heads {
        let mut logits = Vec::new();
        let mut values = Vec::new();
        for t in 0..cfg.seq_len {
            let q = project(wq, h, d_a, &queries[t]);
            let k = project(wk, h, d_a, &seq[t]);
            values.push(project(wv, h, d_a, &seq[t]));
            let z = match cfg.backbone {
                Backbone::Mha => {
                    let mut dot = 0.0;
                    for a in 0..d_a {
                        dot += q[a] * k[a];
                    }
                    dot / (d_a as f64).sqrt()
                }
                Backbone::Din => {
                    let mut x = q.clone();
                    x.extend(&k);
                    x.extend(q.iter().zip(&k).map(|(a, b)| a - b));
                    x.extend(q.iter().zip(&k).map(|(a, b)| a * b));
                    let hid = relu(affine(p(store, "attn.din_score.0.w"), p(store, "attn.din_score.0.b"), &x));
                    affine(p(store, "attn.din_score.1.w"), p(store, "attn.din_score.1.b"), &hid)[0]
                }
            };
            logits.push(z);
        }
        let masked: Vec<f64> = logits
            .iter()
            .zip(mask)
            .map(|(&z, &m)| if m { z } else { MASK_SENTINEL })
            .collect();
        let max = masked.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = masked.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let mut s = vec![0.0; d_a];
        for t in 0..cfg.seq_len {
            for a in 0..d_a {
                s[a] += exps[t] / total * values[t][a];
            }
        }
        pooled.extend(s);
        all_logits.push(logits);
    }
    (all_logits, pooled)
}

pub fn forward(cfg: &ModelConfig, store: &ParameterStore, x: &RefInputs) -> RefOutput {
    let seq = if cfg.ablation.uses_psrg() {
        psrg(cfg, store, &x.domain, &x.seq)
    } else {
        x.seq.clone()
    };
    let queries = if cfg.ablation.uses_pcrg() {
        pcrg(cfg, store, &x.domain, &x.cand)
    } else {
        vec![x.cand.clone(); cfg.seq_len]
    };
    let (logits, pooled) = attend(cfg, store, &queries, &seq, &x.mask);
    let mut h: Vec<f64> = pooled.iter().chain(&x.user).chain(&x.cand).chain(&x.other).copied().collect();
    for i in 0..cfg.mlp.len() {
        h = affine(p(store, &format!("head.{i}.w")), p(store, &format!("head.{i}.b")), &h);
        if i + 1 < cfg.mlp.len() {
            h = relu(h);
        }
    }
    RefOutput {
        seq,
        queries,
        logits,
        pooled,
        logit: h[0],
        prob: sigm(h[0]),
    }
}

/// Random record valid for `cfg`, with a sequence of 1..=T+2 items.
pub fn random_record<R: Rng>(rng: &mut R, cfg: &ModelConfig) -> SampleRecord {
    let f = &cfg.features;
    let len = rng.random_range(1..=cfg.seq_len + 2);
    SampleRecord {
        domain: rng.random_range(0..3),
        stats: vec![rng.random_range(0.0..8.0), rng.random_range(0.0..100.0)],
        seq: (0..len).map(|_| rng.random_range(1..f.item_vocab + 5)).collect(),
        cand: rng.random_range(1..f.item_vocab),
        user: rng.random_range(0..f.user_vocab * 2),
        side: vec![rng.random_range(0..8)],
        label: rng.random_range(0..=1),
    }
}

pub fn random_records(seed: u64, cfg: &ModelConfig, n: usize) -> Vec<SampleRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_record(&mut rng, cfg)).collect()
}
