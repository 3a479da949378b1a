//! Mini-batch training with validation early stopping, evaluation and the
//! ablation protocol.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SampleRecord;
use crate::error::{AdsError, Result};
use crate::features::EncodedBatch;
use crate::metrics::{auc_by_domain, improvement, AucBreakdown, MetricsReport};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParameterStore;
use crate::ranker::{Ablation, ModelConfig, Ranker};

/// Samples scored per shard during evaluation.
const EVAL_SHARD: usize = 1024;

fn default_batch() -> usize {
    256
}

fn default_epochs() -> usize {
    1
}

fn default_patience() -> usize {
    2
}

fn default_log_every() -> u64 {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Passes over the training split.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Stops after this many optimizer steps when set.
    #[serde(default)]
    pub max_steps: Option<u64>,
    /// Validation cadence in steps; 0 evaluates once per epoch.
    #[serde(default)]
    pub eval_every: u64,
    /// Evaluations without validation improvement before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Steps between recorded loss-curve points.
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: default_batch(),
            epochs: default_epochs(),
            max_steps: None,
            eval_every: 0,
            patience: default_patience(),
            log_every: default_log_every(),
            checkpoint_every: 0,
            optimizer: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Schedule used for the ablation benchmark on the default synthetic
    /// dataset.
    pub fn for_synth() -> Self {
        Self {
            epochs: 4,
            eval_every: 200,
            patience: 3,
            optimizer: AdamConfig::with_lr(3e-3),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(AdsError::Config("training.batch_size must be positive".into()));
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return Err(AdsError::Config("training.epochs must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(AdsError::Config("training.log_every must be positive".into()));
        }
        self.optimizer.validate()
    }
}

/// One optimizer step on an encoded batch; returns the pre-step loss.
pub fn train_step(
    ranker: &Ranker,
    store: &mut ParameterStore,
    state: &mut AdamState,
    batch: &EncodedBatch,
) -> Result<f64> {
    let (loss, grads) = ranker.loss_and_grads(store, batch)?;
    state.step(store, &grads)?;
    Ok(loss)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation AUC (or the last ones without
    /// a validation split).
    pub store: ParameterStore,
    pub optimizer: AdamState,
    pub steps: u64,
    pub best_step: u64,
    pub loss_curve: Vec<(u64, f64)>,
    /// `(step, validation AUC)` at every evaluation.
    pub validation: Vec<(u64, f64)>,
}

/// Called after every step with `(step, store, optimizer)`.
pub type StepHook<'a> = dyn FnMut(u64, &ParameterStore, &AdamState) -> Result<()> + 'a;

pub fn train(
    ranker: &Ranker,
    mut store: ParameterStore,
    train: &[SampleRecord],
    val: &[SampleRecord],
    cfg: &TrainConfig,
    shuffle_seed: u64,
    hook: &mut StepHook<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(AdsError::Validation("training split is empty".into()));
    }
    let mut state = AdamState::new(&store, cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let eval_every = if cfg.eval_every == 0 {
        batches_per_epoch
    } else {
        cfg.eval_every
    };
    let total = match cfg.max_steps {
        Some(m) if cfg.epochs == 0 => m,
        Some(m) => m.min(batches_per_epoch * cfg.epochs as u64),
        None => batches_per_epoch * cfg.epochs as u64,
    };

    let mut step = 0u64;
    let mut loss_curve = Vec::new();
    let mut window = (0.0, 0u64);
    let mut validation = Vec::new();
    let mut best: Option<(f64, u64, ParameterStore)> = None;
    let mut stale = 0usize;
    'outer: while step < total {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total {
                break 'outer;
            }
            let records: Vec<SampleRecord> = chunk.iter().map(|&i| train[i].clone()).collect();
            let batch = ranker.encode(&records)?;
            let loss = train_step(ranker, &mut store, &mut state, &batch)?;
            step += 1;
            window.0 += loss;
            window.1 += 1;
            if step.is_multiple_of(cfg.log_every) || step == total {
                loss_curve.push((step, window.0 / window.1 as f64));
                log::info!("step {step}/{total} loss {:.5}", window.0 / window.1 as f64);
                window = (0.0, 0);
            }
            hook(step, &store, &state)?;

            if !val.is_empty() && (step.is_multiple_of(eval_every) || step == total) {
                let (_, b) = evaluate(ranker, &store, val)?;
                let auc = b.overall.unwrap_or(0.5);
                log::info!("step {step} validation auc {auc:.5}");
                validation.push((step, auc));
                if best.as_ref().is_none_or(|(a, _, _)| auc > *a) {
                    best = Some((auc, step, store.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= cfg.patience {
                        log::info!("early stop at step {step}");
                        break 'outer;
                    }
                }
            }
        }
    }
    let (store, best_step) = match best {
        Some((_, s, p)) => (p, s),
        None => (store, step),
    };
    Ok(TrainOutcome {
        store,
        optimizer: state,
        steps: step,
        best_step,
        loss_curve,
        validation,
    })
}

/// Scores records in parallel shards, then computes AUC over the merged
/// scores in record order.
pub fn evaluate(ranker: &Ranker, store: &ParameterStore, records: &[SampleRecord]) -> Result<(Vec<f64>, AucBreakdown)> {
    let shards: Vec<Result<Vec<f64>>> = records
        .par_chunks(EVAL_SHARD)
        .map(|c| ranker.predict(store, c))
        .collect();
    let mut scores = Vec::with_capacity(records.len());
    for s in shards {
        scores.extend(s?);
    }
    let labels: Vec<f64> = records.iter().map(|r| r.label as f64).collect();
    let domains: Vec<usize> = records.iter().map(|r| r.domain).collect();
    let breakdown = auc_by_domain(&scores, &labels, &domains)?;
    Ok((scores, breakdown))
}

/// Trains one configuration and evaluates it on validation and test.
pub fn run_experiment(
    name: &str,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    splits: &crate::data::Splits,
    seed: u64,
    hook: &mut StepHook<'_>,
) -> Result<(MetricsReport, TrainOutcome)> {
    let model = ModelConfig {
        seed,
        ..model.clone()
    };
    let ranker = Ranker::new(model.clone())?;
    let store = ranker.init_params()?;
    let outcome = train(&ranker, store, &splits.train, &splits.val, train_cfg, seed, hook)?;
    let (_, test) = evaluate(&ranker, &outcome.store, &splits.test)?;
    let validation = if splits.val.is_empty() {
        None
    } else {
        Some(evaluate(&ranker, &outcome.store, &splits.val)?.1)
    };
    let cost = ranker.cost();
    let report = MetricsReport {
        name: name.into(),
        seed,
        fingerprint: model.fingerprint(),
        test,
        validation,
        improvements: Vec::new(),
        loss_curve: outcome.loss_curve.clone(),
        params: cost.params,
        params_with_tables: cost.params_with_tables,
        forward_flops_per_sample: cost.forward_flops_per_sample,
        steps: outcome.steps,
    };
    Ok((report, outcome))
}

/// Runs every ablation for every seed. Improvements are relative to the
/// variant without either personalization module, paired by seed.
pub fn run_ablation(
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    splits: &crate::data::Splits,
    seeds: &[u64],
) -> Result<Vec<MetricsReport>> {
    let jobs: Vec<(u64, Ablation)> = seeds
        .iter()
        .flat_map(|&s| Ablation::ALL.into_iter().map(move |a| (s, a)))
        .collect();
    let runs: Vec<Result<MetricsReport>> = jobs
        .par_iter()
        .map(|&(seed, ablation)| {
            log::info!("ablation {ablation} seed {seed}");
            let cfg = model.with_ablation(ablation);
            run_experiment(ablation.name(), &cfg, train_cfg, splits, seed, &mut |_, _, _| Ok(())).map(|(r, _)| r)
        })
        .collect();
    let mut runs = runs.into_iter();
    let mut reports = Vec::with_capacity(jobs.len());
    for _ in seeds {
        let mut per_seed = runs.by_ref().take(Ablation::ALL.len()).collect::<Result<Vec<_>>>()?;
        let base = per_seed
            .iter()
            .find(|r| r.name == Ablation::NoPcrgPsrg.name())
            .map(|r| r.test.clone())
            .expect("baseline variant present");
        for r in &mut per_seed {
            r.improvements = vec![improvement(&r.name, &r.test, Ablation::NoPcrgPsrg.name(), &base)];
        }
        reports.extend(per_seed);
    }
    Ok(reports)
}

/// Median of the overall test AUC of reports named `name`.
pub fn median_auc(reports: &[MetricsReport], name: &str) -> Option<f64> {
    let mut v: Vec<f64> = reports
        .iter()
        .filter(|r| r.name == name)
        .filter_map(|r| r.test.overall)
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}
