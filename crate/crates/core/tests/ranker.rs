mod common;

use ads_core::attention::Backbone;
use ads_core::optim::{AdamConfig, AdamState};
use ads_core::pcrg::query_param_count;
use ads_core::ranker::{count_params_flops, load_checkpoint, save_checkpoint, Ablation, ModelConfig, Ranker};
use ads_core::train::train_step;
use ads_core::{AdsError, Graph, Precision};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randomized(cfg: &ModelConfig, seed: u64) -> (Ranker, ads_core::ParameterStore) {
    let ranker = Ranker::new(cfg.clone()).unwrap();
    let mut store = ranker.init_params().unwrap();
    store.randomize(&mut ChaCha8Rng::seed_from_u64(seed), 0.6);
    (ranker, store)
}

#[test]
fn single_sample_matches_module_composition() {
    for backbone in [Backbone::Mha, Backbone::Din] {
        for ablation in Ablation::ALL {
            let cfg = ModelConfig {
                backbone,
                ablation,
                ..ModelConfig::tiny()
            };
            let (ranker, store) = randomized(&cfg, 11);
            let rec = common::random_records(5, &cfg, 1);
            let got = ranker.predict(&store, &rec).unwrap()[0];
            let x = common::embed(&cfg, &store, &rec[0]);
            let want = common::forward(&cfg, &store, &x).prob;
            assert!((got - want).abs() < 1e-12, "{backbone:?} {ablation}: {got} vs {want}");
        }
    }
}

#[test]
fn zero_final_layer_predicts_half() {
    let cfg = ModelConfig::tiny();
    let ranker = Ranker::new(cfg.clone()).unwrap();
    let mut store = ranker.init_params().unwrap();
    let last = cfg.mlp.len() - 1;
    for n in [format!("head.{last}.w"), format!("head.{last}.b")] {
        store.value_mut(&n).unwrap().data_mut().fill(0.0);
    }
    let recs = common::random_records(1, &cfg, 6);
    assert!(ranker.predict(&store, &recs).unwrap().iter().all(|&p| p == 0.5));
    // Labels matching the constant output 0.5 in expectation: the loss of
    // a constant 0.5 predictor is ln 2 for any labels.
    let batch = ranker.encode(&recs).unwrap();
    let loss = ranker.loss(&store, &batch).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn vanilla_ignores_personalization_parameters() {
    let full = ModelConfig::tiny();
    let (_, mut store) = randomized(&full, 3);
    let vanilla = Ranker::new(full.with_ablation(Ablation::NoPcrgPsrg)).unwrap();
    let recs = common::random_records(2, &full, 5);
    let before = vanilla.predict(&store, &recs).unwrap();
    let names: Vec<String> = store
        .names()
        .into_iter()
        .filter(|n| n.starts_with("psrg.") || n.starts_with("pcrg."))
        .map(String::from)
        .collect();
    assert!(!names.is_empty());
    for n in names {
        store.value_mut(&n).unwrap().data_mut().iter_mut().for_each(|x| *x += 0.37);
    }
    assert_eq!(vanilla.predict(&store, &recs).unwrap(), before);
}

#[test]
fn ablations_share_initial_function() {
    let cfg = ModelConfig::tiny();
    let recs = common::random_records(4, &cfg, 8);
    let preds: Vec<Vec<f64>> = Ablation::ALL
        .iter()
        .map(|&a| {
            let r = Ranker::new(cfg.with_ablation(a)).unwrap();
            let s = r.init_params().unwrap();
            r.predict(&s, &recs).unwrap()
        })
        .collect();
    assert_eq!(preds[0], preds[1]);
    assert_eq!(preds[1], preds[2]);
}

#[test]
fn batched_equals_one_at_a_time() {
    let cfg = ModelConfig::tiny();
    let (ranker, store) = randomized(&cfg, 8);
    let recs = common::random_records(9, &cfg, 7);
    let batched = ranker.predict(&store, &recs).unwrap();
    for (r, b) in recs.iter().zip(&batched) {
        let single = ranker.predict(&store, std::slice::from_ref(r)).unwrap()[0];
        assert_eq!(single.to_bits(), b.to_bits());
    }
}

#[test]
fn predictions_stay_inside_unit_interval() {
    let cfg = ModelConfig::tiny();
    let (ranker, mut store) = randomized(&cfg, 1);
    // Push the head hard so the sigmoid saturates.
    store.value_mut("head.2.b").unwrap().data_mut()[0] = 500.0;
    let recs = common::random_records(3, &cfg, 4);
    for p in ranker.predict(&store, &recs).unwrap() {
        assert!(p > 0.0 && p < 1.0);
    }
}

#[test]
fn training_is_deterministic() {
    let cfg = ModelConfig::tiny();
    let run = || {
        let ranker = Ranker::new(cfg.clone()).unwrap();
        let mut store = ranker.init_params().unwrap();
        let mut adam = AdamState::new(&store, AdamConfig::with_lr(0.01));
        let batch = ranker.encode(&common::random_records(6, &cfg, 8)).unwrap();
        (0..5)
            .map(|_| train_step(&ranker, &mut store, &mut adam, &batch).unwrap())
            .collect::<Vec<_>>()
    };
    let a = run();
    assert_eq!(a, run());
    assert!(a.last() < a.first());
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let cfg = ModelConfig::tiny();
    let (ranker, store) = randomized(&cfg, 21);
    let mut adam = AdamState::new(&store, AdamConfig::default());
    let mut store = store;
    let batch = ranker.encode(&common::random_records(1, &cfg, 4)).unwrap();
    train_step(&ranker, &mut store, &mut adam, &batch).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    save_checkpoint(&path, &cfg, &store, Some(&adam), 1).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    ck.ensure_compatible(&cfg).unwrap();
    assert_eq!(ck.store, store);
    assert_eq!(ck.optimizer.as_ref(), Some(&adam));
    assert_eq!(ck.step, 1);
    let recs = common::random_records(2, &cfg, 5);
    let a = ranker.predict(&store, &recs).unwrap();
    let b = ranker.predict(&ck.store, &recs).unwrap();
    assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());

    let mut other = cfg.clone();
    other.heads = 1;
    assert!(matches!(ck.ensure_compatible(&other), Err(AdsError::Config(_))));
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, b"not a checkpoint at all").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(AdsError::Malformed(_))));
}

#[test]
fn cost_counts_match_store_and_closed_forms() {
    for ablation in Ablation::ALL {
        for backbone in [Backbone::Mha, Backbone::Din] {
            let cfg = ModelConfig {
                ablation,
                backbone,
                ..ModelConfig::tiny()
            };
            let ranker = Ranker::new(cfg.clone()).unwrap();
            let store = ranker.init_params().unwrap();
            let c = count_params_flops(&cfg).unwrap();
            assert_eq!(c.params, store.scalar_count(false));
            assert_eq!(c.params_with_tables, store.scalar_count(true));
            if ablation == Ablation::Full {
                assert_eq!(c.pcrg_params, query_param_count(4, 4, 3, 2));
            } else {
                assert_eq!(c.pcrg_params, 0);
            }
            if ablation == Ablation::NoPcrgPsrg {
                assert_eq!(c.psrg_params + c.pcrg_params, 0);
                assert_eq!(c.psrg_flops + c.pcrg_flops, 0);
            }
        }
    }
}

#[test]
fn capacity_is_monotone_in_ablation() {
    let p: Vec<usize> = Ablation::ALL
        .iter()
        .map(|&a| count_params_flops(&ModelConfig::tiny().with_ablation(a)).unwrap().params)
        .collect();
    assert!(p[0] > p[1] && p[1] > p[2]);
}

#[test]
fn f32_mode_runs_close_to_f64() {
    let cfg = ModelConfig::tiny();
    let (ranker, store) = randomized(&cfg, 4);
    let recs = common::random_records(7, &cfg, 5);
    let a = ranker.predict(&store, &recs).unwrap();
    let r32 = Ranker::new(ModelConfig {
        precision: Precision::F32,
        ..cfg
    })
    .unwrap();
    let b = r32.predict(&store, &recs).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn empty_sequence_is_degenerate() {
    let cfg = ModelConfig::tiny();
    let (ranker, store) = randomized(&cfg, 4);
    let mut rec = common::random_records(7, &cfg, 1);
    rec[0].seq.clear();
    let batch = ranker.encode(&rec).unwrap();
    let mut g = Graph::with_store(&store, Precision::F64);
    assert!(matches!(ranker.forward(&mut g, &batch), Err(AdsError::Degenerate(_))));
}
