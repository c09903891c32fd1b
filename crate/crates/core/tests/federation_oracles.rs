mod common;

use rand::seq::SliceRandom;
use rand::Rng;
use unfoldfed::data::Split;
use unfoldfed::federation::{aggregate, aggregate_raw, client_update, Client, ClientUpdate, Federation, RoundConfig};
use unfoldfed::nn::{sgd_step, ModelSpec, ParamVector};
use unfoldfed::seed::{self, RoundStream};

fn tiny_model() -> ModelSpec {
    ModelSpec::new(vec![784, 6, 10]).unwrap()
}

fn random_updates(seed: u64, k: usize, len: usize) -> Vec<ClientUpdate> {
    let mut rng = seed::rng(seed, &[]);
    (0..k)
        .map(|_| ClientUpdate {
            delta: ParamVector::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect()),
            local_loss: Some(1.0),
            participated: true,
        })
        .collect()
}

#[test]
fn single_batch_update_is_one_gradient_step() {
    let model = tiny_model();
    let data = common::synthetic_dataset(24, 8, Split::Train);
    let client = Client {
        profile: common::profile(0, (0..24).collect(), 1, 0.1, 1.0, 64),
        data: data.full_batch().unwrap(),
    };
    let global = model.init(3);
    let update = client_update(&model, &global, &client, &mut seed::rng(5, &[])).unwrap();
    let (loss, grad) = model.loss_and_grad(&global, &client.data).unwrap();
    let expected: Vec<f64> = grad.iter().map(|g| -0.1 * g).collect();
    assert!(common::max_abs_diff(&update.delta, &expected) < 1e-12);
    assert!((update.local_loss.unwrap() - loss).abs() < 1e-12);
}

/// Reference FedAvg loop written directly against the client primitive.
fn reference_fedavg(
    fed: &Federation,
    w0: &ParamVector,
    rounds: usize,
    eta_g: f64,
    lambda: f64,
    seed: u64,
) -> Vec<ParamVector> {
    let total: usize = fed.clients.iter().map(|c| c.profile.shard.indices.len()).sum();
    let theta: Vec<f64> = fed
        .clients
        .iter()
        .map(|c| c.profile.shard.indices.len() as f64 / total as f64)
        .collect();
    let mut w = w0.clone();
    let mut out = Vec::new();
    for t in 0..rounds {
        let mut acc = vec![0.0; w.len()];
        for (k, client) in fed.clients.iter().enumerate() {
            let mut rng = RoundStream::Evaluation.client_rng(seed, t, k);
            let u = client_update(&fed.model, &w, client, &mut rng).unwrap();
            if u.participated {
                for (a, d) in acc.iter_mut().zip(u.delta.iter()) {
                    *a += theta[k] * d;
                }
            }
        }
        w = ParamVector::new(w.iter().zip(&acc).map(|(&x, &a)| x + eta_g * a - lambda * x).collect());
        out.push(w.clone());
    }
    out
}

#[test]
fn fedavg_matches_reference_loop_bitwise() {
    let fed = common::small_federation(&[60, 20, 35], tiny_model(), 1.0);
    let w0 = fed.model.init(1);
    let config = RoundConfig {
        eta_g: 0.9,
        lambda_model: 1e-3,
        ..Default::default()
    };
    let theta = fed.fedavg_weights().unwrap();
    let mut w = w0.clone();
    let expected = reference_fedavg(&fed, &w0, 4, 0.9, 1e-3, 77);
    for (t, want) in expected.iter().enumerate() {
        w = fed
            .run_round(t, &w, theta.as_slice(), &config, RoundStream::Evaluation, 77, false)
            .unwrap()
            .next;
        assert_eq!(w.as_ref(), want.as_ref(), "round {t}");
    }
}

#[test]
fn aggregation_is_linear_in_deltas() {
    let global = ParamVector::new((0..50).map(|i| i as f64 * 0.01).collect());
    let theta = [0.5, 0.3, 0.2];
    let u1 = random_updates(1, 3, 50);
    let u2 = random_updates(2, 3, 50);
    let (a, b) = (0.7, -1.3);
    let mixed: Vec<ClientUpdate> = u1
        .iter()
        .zip(&u2)
        .map(|(x, y)| ClientUpdate {
            delta: ParamVector::new(x.delta.iter().zip(y.delta.iter()).map(|(p, q)| a * p + b * q).collect()),
            local_loss: None,
            participated: true,
        })
        .collect();
    let step = |u: &[ClientUpdate]| -> Vec<f64> {
        let next = aggregate(&global, u, &theta, 1.0, 0.0).unwrap();
        next.iter().zip(global.iter()).map(|(n, g)| n - g).collect()
    };
    let (s1, s2, sm) = (step(&u1), step(&u2), step(&mixed));
    let combined: Vec<f64> = s1.iter().zip(&s2).map(|(p, q)| a * p + b * q).collect();
    assert!(common::max_abs_diff(&sm, &combined) < 1e-12);
}

#[test]
fn aggregation_ignores_client_order() {
    let global = ParamVector::new(vec![0.1; 40]);
    let updates = random_updates(3, 5, 40);
    let theta = [0.1, 0.2, 0.3, 0.15, 0.25];
    let base = aggregate(&global, &updates, &theta, 1.0, 1e-4).unwrap();
    let mut order: Vec<usize> = (0..5).collect();
    order.shuffle(&mut seed::rng(4, &[]));
    let permuted: Vec<ClientUpdate> = order.iter().map(|&i| updates[i].clone()).collect();
    let permuted_theta: Vec<f64> = order.iter().map(|&i| theta[i]).collect();
    let other = aggregate(&global, &permuted, &permuted_theta, 1.0, 1e-4).unwrap();
    assert!(common::max_abs_diff(&base, &other) < 1e-12);
}

#[test]
fn single_client_equals_centralized_sgd() {
    let model = tiny_model();
    let fed = common::small_federation(&[45], model.clone(), 1.0);
    let w0 = model.init(2);
    let config = RoundConfig {
        eta_g: 1.0,
        lambda_model: 0.0,
        ..Default::default()
    };
    let next = fed
        .run_round(0, &w0, &[1.0], &config, RoundStream::Evaluation, 9, false)
        .unwrap()
        .next;

    let client = &fed.clients[0];
    let mut rng = RoundStream::Evaluation.client_rng(9, 0, 0);
    let _participation: f64 = rng.random();
    let mut w = w0.clone();
    let mut order: Vec<usize> = (0..client.data.len()).collect();
    for _ in 0..client.profile.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(client.profile.batch_size) {
            let (_, g) = model.loss_and_grad(&w, &client.data.select(chunk).unwrap()).unwrap();
            w = sgd_step(&w, &g, client.profile.local_lr, 0.0).unwrap();
        }
    }
    assert!(common::max_abs_diff(&next, &w) < 1e-12);
}

#[test]
fn all_absent_round_only_applies_decay() {
    let fed = common::small_federation(&[30, 30, 30], tiny_model(), 1e-12);
    let w0 = fed.model.init(3);
    let config = RoundConfig {
        eta_g: 1.0,
        lambda_model: 0.01,
        ..Default::default()
    };
    let outcome = fed
        .run_round(0, &w0, &[0.2, 0.3, 0.5], &config, RoundStream::Evaluation, 1, false)
        .unwrap();
    assert!(outcome.record.participation.iter().all(|p| !p));
    assert!(outcome.record.local_losses.iter().all(Option::is_none));
    let expected: Vec<f64> = w0.iter().map(|w| w - 0.01 * w).collect();
    assert_eq!(outcome.next.as_ref(), expected.as_slice());
}

#[test]
fn unchecked_aggregation_accepts_unnormalized_weights() {
    let global = ParamVector::new(vec![1.0; 4]);
    let updates = random_updates(5, 2, 4);
    assert!(aggregate(&global, &updates, &[0.9, 0.9], 1.0, 0.0).is_err());
    let next = aggregate_raw(&global, &updates, &[0.9, 0.9], 1.0, 0.0).unwrap();
    for i in 0..4 {
        let want = 1.0 + 0.9 * updates[0].delta[i] + 0.9 * updates[1].delta[i];
        assert!((next[i] - want).abs() < 1e-12);
    }
}

#[test]
fn round_outputs_do_not_depend_on_thread_count() {
    let fed = common::small_federation(&[40, 25, 30, 20], tiny_model(), 0.7);
    let w0 = fed.model.init(4);
    let theta = fed.fedavg_weights().unwrap();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                fed.run_fixed(
                    &w0,
                    theta.as_slice(),
                    3,
                    &RoundConfig::default(),
                    RoundStream::Evaluation,
                    5,
                )
                .unwrap()
            })
    };
    let (a, ra) = run(1);
    let (b, rb) = run(4);
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}
