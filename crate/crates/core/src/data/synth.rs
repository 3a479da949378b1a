//! Multi-domain click data with a known labeling rule.
//!
//! Items carry standard normal latents. A user belongs to one domain and
//! draws sequences and candidates from a domain-biased item pool. The click
//! logit is `z_cand · M_k · mean(z_seq) / τ + c_k`, so the domain enters the
//! label only through its mixing matrix `M_k` and offset `c_k`.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AdsError, Result};
use crate::metrics::{auc_by_domain, AucBreakdown};
use crate::tensor::sigmoid;

use super::record::{SampleRecord, Splits};

/// Statistic indices in [`SampleRecord::stats`].
pub const STAT_POOL_ENTROPY: usize = 0;
pub const STAT_ACTIVITY: usize = 1;

const CALIBRATION_ITERS: usize = 50;
const RATE_TOLERANCE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_domains: usize,
    /// Item ids run from 1 to `num_items`; 0 is padding.
    pub num_items: usize,
    pub num_users: usize,
    pub samples_per_user: usize,
    pub latent_dim: usize,
    /// Maximum emitted sequence length.
    pub seq_len: usize,
    pub min_seq_len: usize,
    /// Explicit mixing matrices, one `latent_dim × latent_dim` per domain.
    /// When absent they are drawn as `(1-c)·I + c·R_k` with random
    /// rotations `R_k` and `c = domain_contrast`.
    pub mixing: Option<Vec<Vec<Vec<f64>>>>,
    pub domain_contrast: f64,
    pub temperature: f64,
    pub positive_rate: f64,
    /// Probability that an item is drawn from the user's domain pool rather
    /// than the whole catalog, interpolated from the first to the last domain.
    pub pool_bias: [f64; 2],
    /// Log-mean user activity, interpolated from the first to the last domain.
    pub activity_log_mean: [f64; 2],
    pub num_contexts: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_domains: 3,
            num_items: 200,
            num_users: 10_000,
            samples_per_user: 25,
            latent_dim: 4,
            seq_len: 10,
            min_seq_len: 5,
            mixing: None,
            domain_contrast: 1.0,
            temperature: 0.3,
            positive_rate: 0.3,
            pool_bias: [0.5, 0.9],
            activity_log_mean: [1.0, 3.0],
            num_contexts: 4,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_domains", self.num_domains),
            ("num_items", self.num_items),
            ("num_users", self.num_users),
            ("samples_per_user", self.samples_per_user),
            ("latent_dim", self.latent_dim),
            ("seq_len", self.seq_len),
            ("min_seq_len", self.min_seq_len),
            ("num_contexts", self.num_contexts),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(AdsError::Config(format!("{name} must be positive")));
        }
        if self.num_items < self.num_domains {
            return Err(AdsError::Config("num_items must be at least num_domains".into()));
        }
        if self.min_seq_len > self.seq_len {
            return Err(AdsError::Config("min_seq_len exceeds seq_len".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(AdsError::Config("temperature must be positive".into()));
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return Err(AdsError::Config("positive_rate must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.domain_contrast) {
            return Err(AdsError::Config("domain_contrast must lie in [0, 1]".into()));
        }
        if self.pool_bias.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(AdsError::Config("pool_bias entries must lie in [0, 1]".into()));
        }
        if self.activity_log_mean.iter().any(|m| !m.is_finite()) {
            return Err(AdsError::Config("activity_log_mean must be finite".into()));
        }
        if let Some(m) = &self.mixing {
            let d = self.latent_dim;
            if m.len() != self.num_domains || m.iter().any(|mk| mk.len() != d || mk.iter().any(|r| r.len() != d)) {
                return Err(AdsError::Config(format!(
                    "mixing must hold num_domains matrices of {d}×{d}"
                )));
            }
        }
        Ok(())
    }

    fn lerp(range: [f64; 2], k: usize, n: usize) -> f64 {
        if n <= 1 {
            return range[0];
        }
        range[0] + (range[1] - range[0]) * k as f64 / (n - 1) as f64
    }

    pub fn pool_bias_of(&self, domain: usize) -> f64 {
        Self::lerp(self.pool_bias, domain, self.num_domains)
    }
}

/// The ground truth needed to score any record with the labeling rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthOracle {
    pub latent_dim: usize,
    pub temperature: f64,
    /// Row-major latents indexed by item id; row 0 is unused.
    pub item_latents: Vec<f64>,
    pub mixing: Vec<Vec<f64>>,
    pub offsets: Vec<f64>,
}

impl SynthOracle {
    fn latent(&self, item: usize) -> &[f64] {
        &self.item_latents[item * self.latent_dim..(item + 1) * self.latent_dim]
    }

    fn bilinear(&self, m: &[f64], cand: usize, seq: &[usize]) -> f64 {
        let d = self.latent_dim;
        let mut mean = vec![0.0; d];
        for &i in seq {
            for (a, z) in mean.iter_mut().zip(self.latent(i)) {
                *a += z;
            }
        }
        let n = seq.len().max(1) as f64;
        mean.iter_mut().for_each(|a| *a /= n);
        let zc = self.latent(cand);
        let mut acc = 0.0;
        for r in 0..d {
            let row: f64 = (0..d).map(|c| m[r * d + c] * mean[c]).sum();
            acc += zc[r] * row;
        }
        acc / self.temperature
    }

    /// Logit without the domain offset.
    fn raw_logit(&self, domain: usize, cand: usize, seq: &[usize]) -> f64 {
        self.bilinear(&self.mixing[domain], cand, seq)
    }

    /// True click logit of a record.
    pub fn logit(&self, r: &SampleRecord) -> f64 {
        self.raw_logit(r.domain, r.cand, &r.seq) + self.offsets[r.domain]
    }

    /// Logit of the best scorer that ignores the domain: the averaged
    /// mixing matrix and averaged offset.
    pub fn blind_logit(&self, r: &SampleRecord) -> f64 {
        let k = self.mixing.len() as f64;
        let d = self.latent_dim;
        let mean: Vec<f64> = (0..d * d)
            .map(|i| self.mixing.iter().map(|m| m[i]).sum::<f64>() / k)
            .collect();
        let offset = self.offsets.iter().sum::<f64>() / k;
        self.bilinear(&mean, r.cand, &r.seq) + offset
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub samples: usize,
    pub users: usize,
    /// Positive rate per domain.
    pub positive_rate: Vec<f64>,
}

/// Written next to generated data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub spec: SynthSpec,
    pub train: SplitSummary,
    pub val: SplitSummary,
    pub test: SplitSummary,
    /// Domain offsets after calibration.
    pub offsets: Vec<f64>,
    /// Test AUC of the true logits.
    pub oracle_auc: AucBreakdown,
    /// Test AUC of the domain-blind scorer.
    pub blind_oracle_auc: AucBreakdown,
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub splits: Splits,
    pub manifest: SynthManifest,
    pub oracle: SynthOracle,
}

/// Gram–Schmidt on a Gaussian matrix gives a random orthogonal matrix.
fn random_rotation<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let mut rows: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let mut ok = true;
        for i in 0..d {
            for j in 0..i {
                let dot: f64 = (0..d).map(|c| rows[i][c] * rows[j][c]).sum();
                for c in 0..d {
                    rows[i][c] -= dot * rows[j][c];
                }
            }
            let norm = rows[i].iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            rows[i].iter_mut().for_each(|x| *x /= norm);
        }
        if ok {
            return rows.concat();
        }
    }
}

/// Shannon entropy (nats) of the home-domain histogram of a sequence.
fn pool_entropy(seq: &[usize], home: &[usize], k: usize) -> f64 {
    let mut counts = vec![0usize; k];
    for &i in seq {
        counts[home[i]] += 1;
    }
    let n = seq.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Offset `c` with mean `σ(raw + c)` equal to `target`, by bisection.
fn calibrate(raw: &[f64], target: f64) -> Result<f64> {
    if raw.is_empty() {
        return Ok(0.0);
    }
    let rate = |c: f64| raw.iter().map(|&r| sigmoid(r + c)).sum::<f64>() / raw.len() as f64;
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..CALIBRATION_ITERS {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = 0.5 * (lo + hi);
    if (rate(c) - target).abs() > RATE_TOLERANCE {
        return Err(AdsError::Validation(format!(
            "cannot calibrate positive rate {target}: reached {:.4}",
            rate(c)
        )));
    }
    Ok(c)
}

struct Draft {
    user: usize,
    domain: usize,
    seq: Vec<usize>,
    cand: usize,
    context: usize,
    entropy: f64,
    activity: f64,
    raw: f64,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let k = spec.num_domains;
    let d = spec.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut item_latents = vec![0.0; (spec.num_items + 1) * d];
    for z in item_latents[d..].iter_mut() {
        *z = rng.sample(StandardNormal);
    }
    let mut home = vec![0usize; spec.num_items + 1];
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
    for item in 1..=spec.num_items {
        // Round-robin keeps every pool non-empty.
        let h = (item - 1) % k;
        home[item] = h;
        pools[h].push(item);
    }
    let mixing: Vec<Vec<f64>> = match &spec.mixing {
        Some(m) => m.iter().map(|mk| mk.concat()).collect(),
        None => (0..k)
            .map(|_| {
                let r = random_rotation(&mut rng, d);
                let c = spec.domain_contrast;
                (0..d * d)
                    .map(|i| {
                        let eye = if i / d == i % d { 1.0 } else { 0.0 };
                        (1.0 - c) * eye + c * r[i]
                    })
                    .collect()
            })
            .collect(),
    };
    let mut oracle = SynthOracle {
        latent_dim: d,
        temperature: spec.temperature,
        item_latents,
        mixing,
        offsets: vec![0.0; k],
    };

    let mut drafts = Vec::with_capacity(spec.num_users * spec.samples_per_user);
    for user in 0..spec.num_users {
        let domain = rng.random_range(0..k);
        let log_mean = SynthSpec::lerp(spec.activity_log_mean, domain, k);
        let activity = LogNormal::new(log_mean, 0.5)
            .expect("finite parameters")
            .sample(&mut rng)
            .round();
        let bias = spec.pool_bias_of(domain);
        let draw = |rng: &mut ChaCha8Rng| {
            if rng.random_bool(bias) {
                *pools[domain].choose(rng).expect("non-empty pool")
            } else {
                rng.random_range(1..=spec.num_items)
            }
        };
        for _ in 0..spec.samples_per_user {
            let len = rng.random_range(spec.min_seq_len..=spec.seq_len);
            let seq: Vec<usize> = (0..len).map(|_| draw(&mut rng)).collect();
            let cand = draw(&mut rng);
            let context = rng.random_range(0..spec.num_contexts);
            let raw = oracle.raw_logit(domain, cand, &seq);
            drafts.push(Draft {
                user,
                domain,
                entropy: pool_entropy(&seq, &home, k),
                seq,
                cand,
                context,
                activity,
                raw,
            });
        }
    }

    for (dom, offset) in oracle.offsets.iter_mut().enumerate() {
        let raw: Vec<f64> = drafts.iter().filter(|s| s.domain == dom).map(|s| s.raw).collect();
        *offset = calibrate(&raw, spec.positive_rate)?;
    }

    let mut users: Vec<usize> = (0..spec.num_users).collect();
    users.shuffle(&mut rng);
    let n_train = spec.num_users * 8 / 10;
    let n_val = spec.num_users / 10;
    let mut split_of = vec![0u8; spec.num_users];
    for (pos, &u) in users.iter().enumerate() {
        split_of[u] = if pos < n_train {
            0
        } else if pos < n_train + n_val {
            1
        } else {
            2
        };
    }

    let mut splits = Splits::default();
    let mut test_logits = Vec::new();
    for s in drafts {
        let logit = s.raw + oracle.offsets[s.domain];
        let label = rng.random_bool(sigmoid(logit)) as u8;
        let record = SampleRecord {
            domain: s.domain,
            stats: vec![s.entropy, s.activity],
            seq: s.seq,
            cand: s.cand,
            user: s.user,
            side: vec![s.context],
            label,
        };
        match split_of[s.user] {
            0 => splits.train.push(record),
            1 => splits.val.push(record),
            _ => {
                test_logits.push(logit);
                splits.test.push(record)
            }
        }
    }

    let summary = |records: &[SampleRecord]| {
        let mut pos = vec![0usize; k];
        let mut cnt = vec![0usize; k];
        let mut users = std::collections::BTreeSet::new();
        for r in records {
            cnt[r.domain] += 1;
            pos[r.domain] += r.label as usize;
            users.insert(r.user);
        }
        SplitSummary {
            samples: records.len(),
            users: users.len(),
            positive_rate: pos
                .iter()
                .zip(&cnt)
                .map(|(&p, &c)| if c == 0 { 0.0 } else { p as f64 / c as f64 })
                .collect(),
        }
    };
    let all: Vec<&SampleRecord> = splits.train.iter().chain(&splits.val).chain(&splits.test).collect();
    for dom in 0..k {
        let (mut p, mut c) = (0usize, 0usize);
        for r in all.iter().filter(|r| r.domain == dom) {
            c += 1;
            p += r.label as usize;
        }
        if c == 0 {
            continue;
        }
        let rate = p as f64 / c as f64;
        let target = spec.positive_rate;
        // Small domains get four binomial standard deviations of slack.
        let noise = 4.0 * (target * (1.0 - target) / c as f64).sqrt();
        let gap = (rate - target).abs();
        if gap > RATE_TOLERANCE.max(noise) {
            return Err(AdsError::Validation(format!(
                "domain {dom} realized positive rate {rate:.4} is outside {target} ± {:.4}",
                RATE_TOLERANCE.max(noise)
            )));
        }
        if gap > RATE_TOLERANCE {
            log::warn!("domain {dom} realized positive rate {rate:.4} over {c} samples is outside {target} ± {RATE_TOLERANCE}");
        }
    }

    let labels: Vec<f64> = splits.test.iter().map(|r| r.label as f64).collect();
    let domains: Vec<usize> = splits.test.iter().map(|r| r.domain).collect();
    let blind: Vec<f64> = splits.test.iter().map(|r| oracle.blind_logit(r)).collect();
    let manifest = SynthManifest {
        spec: spec.clone(),
        train: summary(&splits.train),
        val: summary(&splits.val),
        test: summary(&splits.test),
        offsets: oracle.offsets.clone(),
        oracle_auc: auc_by_domain(&test_logits, &labels, &domains)?,
        blind_oracle_auc: auc_by_domain(&blind, &labels, &domains)?,
    };
    Ok(SynthDataset {
        splits,
        manifest,
        oracle,
    })
}
