use ads_core::metrics::{auc, relative_improvement};
use proptest::prelude::*;

/// Exhaustive pairwise comparison: wins plus half ties over all pairs.
fn pairwise_auc(scores: &[f64], labels: &[f64]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &yi) in labels.iter().enumerate() {
        if yi != 1.0 {
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj != 0.0 {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..2000).prop_flat_map(|n| {
        (
            // Few distinct values so ties are common.
            prop::collection::vec((0u8..40).prop_map(|v| v as f64 / 7.0), n),
            prop::collection::vec(prop::bool::ANY, n),
        )
            .prop_filter_map("need both classes", |(s, l)| {
                let labels: Vec<f64> = l.iter().map(|&b| b as u8 as f64).collect();
                let pos = labels.iter().filter(|&&y| y == 1.0).count();
                (pos > 0 && pos < labels.len()).then_some((s, labels))
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn rank_sum_matches_pairwise((s, l) in scored()) {
        let a = auc(&s, &l).unwrap();
        prop_assert!((a - pairwise_auc(&s, &l)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn invariant_under_increasing_transform((s, l) in scored()) {
        let t: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() - 2.0).collect();
        prop_assert_eq!(auc(&s, &l).unwrap(), auc(&t, &l).unwrap());
    }

    #[test]
    fn improvement_sign_follows_direction(b in 0.51f64..0.99, m in 0.0f64..1.0) {
        let r = relative_improvement(m, b).unwrap();
        prop_assert_eq!(r > 0.0, m > b);
        prop_assert_eq!(relative_improvement(b, b).unwrap(), 0.0);
    }
}

#[test]
fn published_improvements_round_trip() {
    let cases = [(0.8477, 0.8461, 0.46), (0.8469, 0.8461, 0.23), (0.8475, 0.8461, 0.40)];
    for (m, b, printed) in cases {
        let r = relative_improvement(m, b).unwrap();
        assert!((r - printed).abs() <= 0.005, "{m} vs {b}: {r}");
    }
}
