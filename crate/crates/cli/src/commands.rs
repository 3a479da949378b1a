//! Subcommand implementations.

use std::fmt;
use std::fs;
use std::path::Path;

use ads_core::attention::Backbone;
use ads_core::data::{generate, write_dataset, SampleRecord, SynthSpec};
use ads_core::features::FieldSource;
use ads_core::gradcheck::{gradient_check, GradCheckOptions};
use ads_core::metrics::{ablation_csv, format_table, improvement, AucBreakdown, DomainAuc, MetricsReport};
use ads_core::optim::AdamState;
use ads_core::ranker::{load_checkpoint, save_checkpoint, Ablation, ModelConfig, Ranker};
use ads_core::train::{evaluate, median_auc, run_ablation, run_experiment};
use ads_core::{AdsError, ParameterStore, Precision};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Resolved, RunConfig};

/// A command failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        self.code as i32
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<AdsError> for Failure {
    fn from(e: AdsError) -> Self {
        Self {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        AdsError::from(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        AdsError::from(e).into()
    }
}

type Outcome = Result<(), Failure>;

fn load(config: &Path) -> Result<Resolved, Failure> {
    let run = RunConfig::load(config)?.resolve()?;
    run.prepare_output()?;
    Ok(run)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Outcome {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn gen_data(spec: &Path, out: &Path) -> Outcome {
    let text = fs::read_to_string(spec)?;
    let spec: SynthSpec =
        serde_json::from_str(&text).map_err(|e| AdsError::Config(format!("{}: {e}", spec.display())))?;
    let ds = generate(&spec)?;
    write_dataset(out, &ds)?;
    let m = &ds.manifest;
    println!(
        "wrote {} train, {} val, {} test samples to {}",
        m.train.samples,
        m.val.samples,
        m.test.samples,
        out.display()
    );
    println!(
        "oracle test AUC {} (domain-blind {})",
        fmt_auc(m.oracle_auc.overall),
        fmt_auc(m.blind_oracle_auc.overall)
    );
    Ok(())
}

fn fmt_auc(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.4}"))
}

pub fn train(config: &Path) -> Outcome {
    let run = load(config)?;
    let splits = run.load_splits()?;
    let ckpt_dir = run.checkpoint_dir();
    fs::create_dir_all(&ckpt_dir)?;
    let every = run.training.checkpoint_every;
    let mut hook = |step: u64, store: &ParameterStore, opt: &AdamState| {
        if every > 0 && step.is_multiple_of(every) {
            save_checkpoint(&ckpt_dir.join(format!("step-{step}.ckpt")), &run.model, store, Some(opt), step)?;
        }
        Ok(())
    };
    let name = run.model.ablation.name();
    let (report, outcome) = run_experiment(name, &run.model, &run.training, &splits, run.seed, &mut hook)?;
    // The returned parameters are the best by validation AUC; optimizer
    // moments only match them when the best step is the last one.
    let moments = (outcome.best_step == outcome.steps).then_some(&outcome.optimizer);
    let path = ckpt_dir.join(format!("step-{}.ckpt", outcome.best_step));
    save_checkpoint(&path, &run.model, &outcome.store, moments, outcome.best_step)?;
    write_json(&run.metrics_dir().join("report.json"), &report)?;
    print!("{}", format_table(&[&report]));
    println!("checkpoint {}", path.display());
    Ok(())
}

pub fn eval(config: &Path, checkpoint: &Path) -> Outcome {
    let run = load(config)?;
    let ck = load_checkpoint(checkpoint)?;
    ck.ensure_compatible(&run.model)?;
    let splits = run.load_splits()?;
    let ranker = Ranker::new(run.model.clone())?;
    let (_, test) = evaluate(&ranker, &ck.store, &splits.test)?;
    let validation = if splits.val.is_empty() {
        None
    } else {
        Some(evaluate(&ranker, &ck.store, &splits.val)?.1)
    };
    let cost = ranker.cost();
    let report = MetricsReport {
        name: run.model.ablation.name().into(),
        seed: run.seed,
        fingerprint: ck.fingerprint,
        test,
        validation,
        improvements: Vec::new(),
        loss_curve: Vec::new(),
        params: cost.params,
        params_with_tables: cost.params_with_tables,
        forward_flops_per_sample: cost.forward_flops_per_sample,
        steps: ck.step,
    };
    write_json(&run.metrics_dir().join("report.json"), &report)?;
    print!("{}", format_table(&[&report]));
    Ok(())
}

/// Per-domain and overall medians across seeds for one ablation.
fn median_report(reports: &[MetricsReport], name: &str) -> Option<MetricsReport> {
    let runs: Vec<&MetricsReport> = reports.iter().filter(|r| r.name == name).collect();
    let first = *runs.first()?;
    let median = |mut v: Vec<f64>| -> Option<f64> {
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
    };
    let per_domain = first
        .test
        .per_domain
        .iter()
        .map(|d| DomainAuc {
            auc: median(
                runs.iter()
                    .filter_map(|r| r.test.per_domain.iter().find(|x| x.domain == d.domain)?.auc)
                    .collect(),
            ),
            ..d.clone()
        })
        .collect();
    Some(MetricsReport {
        name: format!("{name} (median)"),
        test: AucBreakdown {
            overall: median_auc(reports, name),
            count: first.test.count,
            per_domain,
        },
        validation: None,
        improvements: Vec::new(),
        loss_curve: Vec::new(),
        ..first.clone()
    })
}

pub fn ablate(config: &Path) -> Outcome {
    let run = load(config)?;
    let splits = run.load_splits()?;
    let reports = run_ablation(&run.model, &run.training, &splits, &run.ablation_seeds)?;
    let refs: Vec<&MetricsReport> = reports.iter().collect();
    let k = run.num_domains(&splits);
    fs::write(run.metrics_dir().join("ablation.csv"), ablation_csv(&refs, k))?;
    write_json(&run.metrics_dir().join("ablation.json"), &reports)?;

    let mut medians: Vec<MetricsReport> = Ablation::ALL
        .iter()
        .filter_map(|a| median_report(&reports, a.name()))
        .collect();
    if let Some(base) = medians.iter().find(|m| m.name.starts_with(Ablation::NoPcrgPsrg.name())).cloned() {
        for m in &mut medians {
            m.improvements = vec![improvement(&m.name, &m.test, &base.name, &base.test)];
        }
    }
    print!("{}", format_table(&refs));
    println!();
    print!("{}", format_table(&medians.iter().collect::<Vec<_>>()));
    println!("wrote {}", run.metrics_dir().join("ablation.csv").display());
    Ok(())
}

/// Random records covering every feature of `cfg`, including ids beyond
/// each vocabulary to exercise folding.
fn random_records(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<SampleRecord> {
    let f = &cfg.features;
    let domains = f
        .domain
        .explicit
        .iter()
        .find(|c| c.source == FieldSource::Domain)
        .map_or(3, |c| c.vocab);
    let stats = f.domain.implicit.iter().map(|b| b.stat + 1).max().unwrap_or(0);
    let top = f
        .domain
        .implicit
        .iter()
        .filter_map(|b| b.boundaries.last().copied())
        .fold(1.0, f64::max);
    let sides: Vec<usize> = f
        .domain
        .explicit
        .iter()
        .chain(&f.other)
        .filter_map(|c| match c.source {
            FieldSource::Side(i) => Some((i, c.vocab)),
            FieldSource::Domain => None,
        })
        .fold(Vec::new(), |mut v, (i, vocab)| {
            if v.len() <= i {
                v.resize(i + 1, 1);
            }
            v[i] = v[i].max(vocab);
            v
        });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=cfg.seq_len + 2);
            SampleRecord {
                domain: rng.random_range(0..domains),
                stats: (0..stats).map(|_| rng.random_range(0.0..1.5 * top)).collect(),
                seq: (0..len).map(|_| rng.random_range(1..f.item_vocab + 5)).collect(),
                cand: rng.random_range(1..f.item_vocab),
                user: rng.random_range(0..f.user_vocab * 2),
                side: sides.iter().map(|&v| rng.random_range(0..v * 2)).collect(),
                label: rng.random_range(0..=1),
            }
        })
        .collect()
}

pub fn gradcheck(config: Option<&Path>, batch: usize, seed: u64, tolerance: f64) -> Outcome {
    if batch == 0 {
        return Err(AdsError::Config("batch must be positive".into()).into());
    }
    let models: Vec<ModelConfig> = match config {
        Some(path) => vec![RunConfig::load(path)?.resolve()?.model],
        None => [Backbone::Mha, Backbone::Din]
            .into_iter()
            .flat_map(|backbone| {
                Ablation::ALL.into_iter().map(move |ablation| ModelConfig {
                    backbone,
                    ablation,
                    ..ModelConfig::tiny()
                })
            })
            .collect(),
    };
    let opts = GradCheckOptions {
        tolerance,
        max_coords_per_param: if config.is_some() { 200 } else { usize::MAX },
        ..GradCheckOptions::default()
    };
    let mut worst = 0.0f64;
    let mut failed = 0;
    for model in models {
        let model = ModelConfig {
            precision: Precision::F64,
            ..model
        };
        let ranker = Ranker::new(model.clone())?;
        let mut store = ranker.init_params()?;
        store.randomize(&mut ChaCha8Rng::seed_from_u64(seed), 0.5);
        let batch = ranker.encode(&random_records(&model, batch, seed.wrapping_add(6)))?;
        let r = gradient_check(&mut store, |s| ranker.loss_and_grads(s, &batch), &opts)?;
        println!(
            "{:<4} {:<13} {} coords, max relative error {:.3e} at {}[{}] {}",
            format!("{:?}", model.backbone).to_lowercase(),
            model.ablation.name(),
            r.checked,
            r.max_rel_error,
            r.worst_param,
            r.worst_index,
            if r.passed { "ok" } else { "FAIL" }
        );
        worst = worst.max(r.max_rel_error);
        failed += usize::from(!r.passed);
    }
    println!("max relative error {worst:.3e} (tolerance {tolerance:e})");
    if failed > 0 {
        return Err(Failure {
            code: 3,
            message: format!("{failed} gradient checks exceeded the tolerance"),
        });
    }
    Ok(())
}
