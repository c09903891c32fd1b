mod common;

use std::collections::HashSet;

use proptest::prelude::*;
use unfoldfed::data::{partition_balanced, partition_statistical, SettingKind, SettingSpec, Shard, Split};
use unfoldfed::federation::{aggregate, check_simplex, fedavg_weights, ClientUpdate, RoundRecord};
use unfoldfed::nn::ParamVector;
use unfoldfed::report::{csv_string, format_sig9, parse_csv, RunHistory};
use unfoldfed::unfolding::{meta_step, Normalization, WeightLogits, WeightMap};

fn logit_row(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-40.0f64..40.0, k)
}

proptest! {
    #[test]
    fn softmax_rows_lie_on_simplex(row in (1usize..9).prop_flat_map(logit_row)) {
        let theta = WeightMap::softmax().weights(&row).unwrap();
        let sum: f64 = theta.iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-9);
        prop_assert!(theta.iter().all(|t| *t >= 0.0));
    }

    #[test]
    fn softmax_is_shift_invariant(row in logit_row(5), shift in -100.0f64..100.0) {
        let map = WeightMap::softmax();
        let shifted: Vec<f64> = row.iter().map(|z| z + shift).collect();
        let a = map.weights(&row).unwrap();
        let b = map.weights(&shifted).unwrap();
        prop_assert!(common::max_abs_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn post_hoc_rows_lie_on_simplex(row in logit_row(4)) {
        let map = WeightMap::new(Normalization::PostHoc, None).unwrap();
        if let Ok(theta) = map.weights(&row.iter().map(|z| z.abs() / 40.0).collect::<Vec<_>>()) {
            let sum: f64 = theta.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
            prop_assert!(theta.iter().all(|t| *t >= 0.0));
        }
    }

    #[test]
    fn meta_steps_keep_weights_on_simplex(
        rows in prop::collection::vec(logit_row(3), 1..5),
        grads in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 5),
        eta in 0.0f64..2.0,
    ) {
        let z = WeightLogits::from_rows(rows.clone()).unwrap();
        let g = WeightLogits::from_rows(grads[..rows.len()].to_vec()).unwrap();
        let next = meta_step(&z, &g, eta, 1e-4).unwrap();
        for row in WeightMap::softmax().theta_matrix(&next).unwrap() {
            prop_assert!(check_simplex(&row).is_ok());
        }
    }

    #[test]
    fn fedavg_weights_are_size_proportional(sizes in prop::collection::vec(1usize..5000, 1..8)) {
        let shards: Vec<Shard> = sizes
            .iter()
            .enumerate()
            .map(|(k, &n)| Shard { owner: k, indices: (0..n).collect() })
            .collect();
        let theta = fedavg_weights(&shards).unwrap();
        let total: usize = sizes.iter().sum();
        prop_assert!(check_simplex(theta.as_slice()).is_ok());
        for (t, n) in theta.as_slice().iter().zip(&sizes) {
            prop_assert!((t - *n as f64 / total as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn null_updates_only_decay(w in prop::collection::vec(-5.0f64..5.0, 1..30), lambda in 0.0f64..0.1) {
        let updates = vec![ClientUpdate::absent(w.len()), ClientUpdate { delta: ParamVector::zeros(w.len()), local_loss: None, participated: true }];
        let global = ParamVector::new(w.clone());
        let next = aggregate(&global, &updates, &[0.4, 0.6], 1.0, lambda).unwrap();
        for (n, x) in next.iter().zip(&w) {
            prop_assert!((n - (1.0 - lambda) * x).abs() < 1e-12);
        }
    }

    #[test]
    fn sig9_round_trips(x in prop::num::f64::NORMAL) {
        let back: f64 = format_sig9(x).parse().unwrap();
        prop_assert!(((back - x) / x).abs() <= 5e-9);
    }

    #[test]
    fn csv_round_trips(
        thetas in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 1..12),
        masks in prop::collection::vec(prop::collection::vec(any::<bool>(), 3), 12),
    ) {
        let mut history = RunHistory::new(3, serde_json::Value::Null);
        for (t, theta) in thetas.iter().enumerate() {
            history.push(t / 4, RoundRecord {
                round: t % 4,
                theta: theta.iter().map(|v| format_sig9(*v).parse().unwrap()).collect(),
                local_losses: vec![None; 3],
                participation: masks[t].clone(),
                val_loss: 1.0 / (t + 1) as f64,
                test_accuracy: (t % 10) as f64 / 10.0,
            }).unwrap();
        }
        let csv = csv_string(&history);
        let back = parse_csv(&csv).unwrap();
        prop_assert_eq!(csv_string(&back), csv);
    }
}

fn pool() -> unfoldfed::data::Dataset {
    common::synthetic_dataset(2000, 17, Split::Train)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn balanced_shards_are_disjoint_and_sized(clients in 1usize..8, per_client in 1usize..250, seed in any::<u64>()) {
        let data = pool();
        let shards = partition_balanced(&data, clients, per_client, seed).unwrap();
        prop_assert_eq!(shards.len(), clients);
        let mut seen = HashSet::new();
        for s in &shards {
            prop_assert_eq!(s.size(), per_client);
            for &i in &s.indices {
                prop_assert!(i < data.len());
                prop_assert!(seen.insert(i));
            }
        }
    }

    #[test]
    fn statistical_shards_respect_label_sets(sizes in prop::collection::vec(2usize..80, 5), seed in any::<u64>()) {
        let data = pool();
        let mut spec = SettingSpec::defaults(SettingKind::Statistical, 5);
        spec.client_sizes = sizes.clone();
        spec.seed = seed;
        let shards = partition_statistical(&data, &spec).unwrap();
        let mut seen = HashSet::new();
        for (k, s) in shards.iter().enumerate() {
            prop_assert_eq!(s.size(), sizes[k]);
            for &i in &s.indices {
                prop_assert!(spec.label_sets[k].contains(&data.label(i)));
                prop_assert!(seen.insert(i));
            }
        }
    }
}
