use ads_core::data::{
    generate, load_dataset_dir, load_jsonl, split_by_user, write_dataset, write_jsonl, JsonlSchema, SynthSpec,
};
use ads_core::metrics::auc_by_domain;
use ads_core::AdsError;

fn small(seed: u64) -> SynthSpec {
    SynthSpec {
        num_items: 150,
        num_users: 300,
        samples_per_user: 8,
        seed,
        ..SynthSpec::default()
    }
}

fn identity(d: usize, sign: f64) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { sign } else { 0.0 }).collect())
        .collect()
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    write_dataset(&a, &generate(&small(3)).unwrap()).unwrap();
    write_dataset(&b, &generate(&small(3)).unwrap()).unwrap();
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn jsonl_round_trip() {
    let ds = generate(&small(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &ds).unwrap();
    let loaded = load_dataset_dir(dir.path(), &JsonlSchema::default(), None).unwrap();
    assert_eq!(loaded, ds.splits);
}

#[test]
fn empty_file_is_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    std::fs::write(&path, "").unwrap();
    let l = load_jsonl(&path, &JsonlSchema::default(), None).unwrap();
    assert!(l.records.is_empty() && l.malformed.is_empty());
}

#[test]
fn malformed_lines_are_counted_and_capped() {
    let ds = generate(&small(2)).unwrap();
    let recs: Vec<_> = ds.splits.train.iter().take(300).cloned().collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.jsonl");
    write_jsonl(&path, &recs).unwrap();
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{\"domain\":0,\"seq\":[1],\"cand\":2,\"user\":3}\n");
    std::fs::write(&path, &text).unwrap();
    let l = load_jsonl(&path, &JsonlSchema::default(), None).unwrap();
    assert_eq!(l.malformed, vec![301]);
    assert_eq!(l.records.len(), 300);

    text.push_str("not json\n{}\n{\"label\":1}\n");
    std::fs::write(&path, &text).unwrap();
    assert!(matches!(load_jsonl(&path, &JsonlSchema::default(), None), Err(AdsError::Malformed(_))));
}

#[test]
fn long_sequences_keep_recent_items() {
    let ds = generate(&small(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.jsonl");
    write_jsonl(&path, &ds.splits.train[..20]).unwrap();
    let l = load_jsonl(&path, &JsonlSchema::default(), Some(3)).unwrap();
    for (a, b) in l.records.iter().zip(&ds.splits.train) {
        assert_eq!(a.seq[..], b.seq[b.seq.len() - 3..]);
    }
}

#[test]
fn missing_file_is_io_error() {
    let err = load_jsonl(std::path::Path::new("/nonexistent/x.jsonl"), &JsonlSchema::default(), None).unwrap_err();
    assert!(matches!(err, AdsError::Io(_)));
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn user_split_is_disjoint_and_deterministic() {
    let ds = generate(&small(4)).unwrap();
    let all: Vec<_> = ds.splits.train.iter().chain(&ds.splits.test).cloned().collect();
    let a = split_by_user(all.clone(), 9);
    assert_eq!(a, split_by_user(all.clone(), 9));
    assert_eq!(a.len(), all.len());
    let users = |r: &[ads_core::data::SampleRecord]| r.iter().map(|x| x.user).collect::<std::collections::BTreeSet<_>>();
    assert!(users(&a.train).is_disjoint(&users(&a.test)));
    assert!(users(&a.train).is_disjoint(&users(&a.val)));
}

#[test]
fn oracle_scores_reproduce_self_report() {
    let ds = generate(&small(5)).unwrap();
    let t = &ds.splits.test;
    let scores: Vec<f64> = t.iter().map(|r| ds.oracle.logit(r)).collect();
    let labels: Vec<f64> = t.iter().map(|r| r.label as f64).collect();
    let domains: Vec<usize> = t.iter().map(|r| r.domain).collect();
    let b = auc_by_domain(&scores, &labels, &domains).unwrap();
    let want = &ds.manifest.oracle_auc;
    assert!((b.overall.unwrap() - want.overall.unwrap()).abs() < 1e-9);
    for (x, y) in b.per_domain.iter().zip(&want.per_domain) {
        assert!((x.auc.unwrap() - y.auc.unwrap()).abs() < 1e-9);
    }
}

#[test]
fn default_spec_has_headroom_and_rewards_domains() {
    let ds = generate(&SynthSpec::default()).unwrap();
    let m = &ds.manifest;
    let aware = m.oracle_auc.overall.unwrap();
    let blind = m.blind_oracle_auc.overall.unwrap();
    assert!(aware >= 0.85, "{aware}");
    assert!(blind < aware, "{blind} vs {aware}");
    for split in [&m.train, &m.val, &m.test] {
        assert_eq!(split.positive_rate.len(), 3);
    }
    assert_eq!(m.train.samples + m.val.samples + m.test.samples, 250_000);
    for r in &m.train.positive_rate {
        assert!((r - 0.3).abs() <= 0.02 + 0.01, "{r}");
    }
}

#[test]
fn single_identity_domain_has_no_blind_penalty() {
    let spec = SynthSpec {
        num_domains: 1,
        mixing: Some(vec![identity(4, 1.0)]),
        ..small(6)
    };
    let ds = generate(&spec).unwrap();
    assert_eq!(ds.manifest.oracle_auc.overall, ds.manifest.blind_oracle_auc.overall);
}

#[test]
fn opposite_domains_self_report_per_domain_oracle() {
    let spec = SynthSpec {
        num_domains: 2,
        mixing: Some(vec![identity(4, 1.0), identity(4, -1.0)]),
        temperature: 1.0,
        ..small(7)
    };
    let ds = generate(&spec).unwrap();
    let t = &ds.splits.test;
    for dom in 0..2 {
        let recs: Vec<_> = t.iter().filter(|r| r.domain == dom).collect();
        let scores: Vec<f64> = recs.iter().map(|r| ds.oracle.logit(r)).collect();
        let labels: Vec<f64> = recs.iter().map(|r| r.label as f64).collect();
        let a = ads_core::metrics::auc(&scores, &labels).unwrap();
        let reported = ds.manifest.oracle_auc.per_domain[dom].auc.unwrap();
        assert!((a - reported).abs() < 1e-12);
        assert!(a > 0.5);
    }
    // The averaged matrix is zero, so a domain-blind scorer only ranks by offset.
    let blind = ds.manifest.blind_oracle_auc.overall.unwrap();
    assert!(blind < ds.manifest.oracle_auc.overall.unwrap());
}
