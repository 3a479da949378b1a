//! Ranking metrics and experiment reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{AdsError, Result};

/// Area under the ROC curve by rank sums, ties counted as half a win.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(AdsError::dim("auc", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(AdsError::Validation("auc scores contain NaN".into()));
    }
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    let negatives = labels.iter().filter(|&&y| y == 0.0).count();
    if positives + negatives != labels.len() {
        return Err(AdsError::Validation("auc labels must be 0 or 1".into()));
    }
    if positives == 0 || negatives == 0 {
        return Err(AdsError::Degenerate(format!(
            "auc needs both classes, got {positives} positives and {negatives} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Ranks are 1-based; a tie group shares the mean of its ranks.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j + 2) as f64 / 2.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1.0).count();
        rank_sum += mean_rank * pos_in_group as f64;
        i = j + 1;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Relative AUC gain over a baseline, in percent, anchored at the random
/// ranker's 0.5.
pub fn relative_improvement(measured: f64, baseline: f64) -> Result<f64> {
    if baseline.is_nan() || baseline <= 0.5 {
        return Err(AdsError::Validation(format!(
            "baseline auc {baseline} must exceed 0.5"
        )));
    }
    Ok(((measured - 0.5) / (baseline - 0.5) - 1.0) * 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainAuc {
    pub domain: usize,
    pub count: usize,
    pub positives: usize,
    /// `None` when the domain holds a single class.
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucBreakdown {
    pub overall: Option<f64>,
    pub count: usize,
    pub per_domain: Vec<DomainAuc>,
}

/// Overall and per-domain AUC; single-class groups are reported as
/// undefined rather than failing the whole breakdown.
pub fn auc_by_domain(scores: &[f64], labels: &[f64], domains: &[usize]) -> Result<AucBreakdown> {
    if domains.len() != scores.len() {
        return Err(AdsError::dim("auc_by_domain", &[scores.len()], &[domains.len()]));
    }
    let defined = |r: Result<f64>| match r {
        Ok(a) => Ok(Some(a)),
        Err(AdsError::Degenerate(_)) => Ok(None),
        Err(e) => Err(e),
    };
    let overall = defined(auc(scores, labels))?;
    let mut groups: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((&s, &y), &d) in scores.iter().zip(labels).zip(domains) {
        let e = groups.entry(d).or_default();
        e.0.push(s);
        e.1.push(y);
    }
    let mut per_domain = Vec::with_capacity(groups.len());
    for (domain, (s, y)) in groups {
        per_domain.push(DomainAuc {
            domain,
            count: s.len(),
            positives: y.iter().filter(|&&v| v == 1.0).count(),
            auc: defined(auc(&s, &y))?,
        });
    }
    Ok(AucBreakdown {
        overall,
        count: scores.len(),
        per_domain,
    })
}

/// Improvement of one named run over a baseline, overall and per domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub name: String,
    pub baseline: String,
    pub overall: Option<f64>,
    pub per_domain: Vec<Option<f64>>,
}

pub fn improvement(name: &str, measured: &AucBreakdown, baseline_name: &str, baseline: &AucBreakdown) -> Improvement {
    let imp = |m: Option<f64>, b: Option<f64>| match (m, b) {
        (Some(m), Some(b)) => relative_improvement(m, b).ok(),
        _ => None,
    };
    let per_domain = measured
        .per_domain
        .iter()
        .map(|d| {
            let b = baseline.per_domain.iter().find(|x| x.domain == d.domain).and_then(|x| x.auc);
            imp(d.auc, b)
        })
        .collect();
    Improvement {
        name: name.into(),
        baseline: baseline_name.into(),
        overall: imp(measured.overall, baseline.overall),
        per_domain,
    }
}

/// Output of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub name: String,
    pub seed: u64,
    pub fingerprint: String,
    pub test: AucBreakdown,
    #[serde(default)]
    pub validation: Option<AucBreakdown>,
    #[serde(default)]
    pub improvements: Vec<Improvement>,
    /// `(step, mean training loss)` pairs.
    #[serde(default)]
    pub loss_curve: Vec<(u64, f64)>,
    pub params: usize,
    pub params_with_tables: usize,
    pub forward_flops_per_sample: usize,
    #[serde(default)]
    pub steps: u64,
}

fn fmt_opt(v: Option<f64>, scale: f64, suffix: &str) -> String {
    match v {
        Some(x) => format!("{:.2}{suffix}", x * scale),
        None => "undefined".into(),
    }
}

/// Fixed-width table with one row per report: per-domain and overall AUC
/// (percent, two decimals) and the overall improvement when present.
pub fn format_table(reports: &[&MetricsReport]) -> String {
    let domains: Vec<usize> = reports
        .iter()
        .flat_map(|r| r.test.per_domain.iter().map(|d| d.domain))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut out = String::new();
    let _ = write!(out, "{:<16}", "model");
    for d in &domains {
        let _ = write!(out, "{:>12}", format!("D{d} AUC"));
    }
    let _ = writeln!(out, "{:>12}{:>12}", "overall", "imp.");
    for r in reports {
        let _ = write!(out, "{:<16}", r.name);
        for d in &domains {
            let a = r.test.per_domain.iter().find(|x| x.domain == *d).and_then(|x| x.auc);
            let _ = write!(out, "{:>12}", fmt_opt(a, 100.0, "%"));
        }
        let imp = r.improvements.first().and_then(|i| i.overall);
        let imp = match imp {
            Some(x) => format!("{x:+.2}%"),
            None => "-".into(),
        };
        let _ = writeln!(out, "{:>12}{:>12}", fmt_opt(r.test.overall, 100.0, "%"), imp);
    }
    out
}

/// One CSV row per report: `config,seed,overall_auc,d0_auc,...`.
pub fn ablation_csv(reports: &[&MetricsReport], num_domains: usize) -> String {
    let mut out = String::from("config,seed,overall_auc");
    for d in 0..num_domains {
        let _ = write!(out, ",d{d}_auc");
    }
    out.push('\n');
    for r in reports {
        let _ = write!(out, "{},{},{}", r.name, r.seed, csv_cell(r.test.overall));
        for d in 0..num_domains {
            let a = r.test.per_domain.iter().find(|x| x.domain == d).and_then(|x| x.auc);
            let _ = write!(out, ",{}", csv_cell(a));
        }
        out.push('\n');
    }
    out
}

fn csv_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.6}"))
}
