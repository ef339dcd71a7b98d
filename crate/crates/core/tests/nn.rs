use defend_core::data::Dataset;
use defend_core::nn::{output_layer_delta, train_local, ModelParams, TrainConfig};
use defend_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain nested-loop forward pass over explicit matrices.
fn oracle_forward(model: &ModelParams, x: &[f64]) -> Vec<f64> {
    let sizes = model.layer_sizes();
    let flat = model.as_slice();
    let mut offset = 0;
    let mut act = x.to_vec();
    for layer in 0..sizes.len() - 1 {
        let (n_in, n_out) = (sizes[layer], sizes[layer + 1]);
        let w: Vec<Vec<f64>> = (0..n_out)
            .map(|o| flat[offset + o * n_in..offset + (o + 1) * n_in].to_vec())
            .collect();
        offset += n_in * n_out;
        let b = &flat[offset..offset + n_out];
        offset += n_out;
        let mut next = vec![0.0; n_out];
        for o in 0..n_out {
            let mut z = b[o];
            for i in 0..n_in {
                z += w[o][i] * act[i];
            }
            next[o] = if layer + 2 < sizes.len() {
                z.max(0.0)
            } else {
                z
            };
        }
        act = next;
    }
    act
}

fn random_net(sizes: &[usize], rng: &mut ChaCha8Rng) -> ModelParams {
    ModelParams::init(sizes, rng).unwrap()
}

fn random_inputs(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

#[test]
fn forward_matches_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for sizes in [vec![4, 6, 3], vec![5, 7, 4, 3], vec![3, 3]] {
        let model = random_net(&sizes, &mut rng);
        let batch = 5;
        let x = random_inputs(batch * sizes[0], &mut rng);
        let logits = model.forward(&x).unwrap();
        let classes = *sizes.last().unwrap();
        for b in 0..batch {
            let expect = oracle_forward(&model, &x[b * sizes[0]..(b + 1) * sizes[0]]);
            for (got, want) in logits[b * classes..(b + 1) * classes].iter().zip(&expect) {
                assert!((got - want).abs() < 1e-6, "{got} vs {want}");
            }
        }
    }
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for net in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + net);
        let sizes = [
            rng.random_range(2..6),
            rng.random_range(2..8),
            rng.random_range(3..6),
        ];
        let model = random_net(&sizes, &mut rng);
        let batch = 4;
        let x = random_inputs(batch * sizes[0], &mut rng);
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=sizes[2])).collect();
        let (_, grad) = model.loss_and_gradient(&x, &labels).unwrap();
        for i in 0..model.len() {
            let mut plus = model.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = model.clone();
            minus.as_mut_slice()[i] -= h;
            let numeric =
                (plus.loss(&x, &labels).unwrap() - minus.loss(&x, &labels).unwrap()) / (2.0 * h);
            let rel = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn single_step_equals_closed_form_softmax_gradient() {
    // Linear softmax model, one sample: dL/dW = (p - y) x^T, dL/db = p - y.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let global = random_net(&[3, 4], &mut rng);
    let x = vec![0.5, -1.0, 2.0];
    let label = 2;
    let shard = Dataset::new(3, 4, x.clone(), vec![label]).unwrap();
    let lr = 0.1;
    let cfg = TrainConfig {
        learning_rate: lr,
        momentum: 0.5,
        local_epochs: 1,
        batch_size: 1,
        seed: 0,
    };
    let local = train_local(&global, &shard, &cfg).unwrap();

    let z = oracle_forward(&global, &x);
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = z.iter().map(|v| (v - max).exp()).sum();
    let p: Vec<f64> = z.iter().map(|v| (v - max).exp() / denom).collect();
    let g = global.as_slice();
    let mut expected = g.to_vec();
    for o in 0..4 {
        let err = p[o] - if o + 1 == label { 1.0 } else { 0.0 };
        for i in 0..3 {
            expected[o * 3 + i] -= lr * err * x[i];
        }
        expected[12 + o] -= lr * err;
    }
    for (a, b) in local.as_slice().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn two_blobs(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let class = 1 + i % 2;
        let center = if class == 1 { -2.0 } else { 2.0 };
        features.push(center + rng.random_range(-0.5..0.5));
        features.push(center + rng.random_range(-0.5..0.5));
        labels.push(class);
    }
    Dataset::new(2, 2, features, labels).unwrap()
}

#[test]
fn training_lowers_loss_on_separable_blobs() {
    let data = two_blobs(200, 5);
    let global = random_net(&[2, 8, 2], &mut ChaCha8Rng::seed_from_u64(6));
    let cfg = TrainConfig {
        local_epochs: 3,
        ..TrainConfig::default()
    };
    let local = train_local(&global, &data, &cfg).unwrap();
    let before = global.loss(data.features(), data.labels()).unwrap();
    let after = local.loss(data.features(), data.labels()).unwrap();
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn training_is_pure_and_bitwise_deterministic() {
    let data = two_blobs(50, 7);
    let global = random_net(&[2, 5, 2], &mut ChaCha8Rng::seed_from_u64(8));
    let snapshot = global.clone();
    let cfg = TrainConfig {
        seed: 42,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let a = train_local(&global, &data, &cfg).unwrap();
    let b = train_local(&global, &data, &cfg).unwrap();
    assert_eq!(global, snapshot);
    assert_eq!(
        a.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    let c = train_local(&global, &data, &TrainConfig { seed: 43, ..cfg }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn output_delta_examples() {
    // Output layer 2 -> 2; row 0 of global is (1, 2 | 0), of local (4, 6 | 1).
    let global = ModelParams::from_parts(&[2, 2], vec![1.0, 2.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let local = ModelParams::from_parts(&[2, 2], vec![4.0, 6.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    let delta = output_layer_delta(&local, &global, 0, 1).unwrap();
    assert_eq!(delta.row(1), &[3.0, 4.0, 1.0]);
    assert_eq!(delta.row(2), &[0.0, 0.0, 0.0]);
    let same = output_layer_delta(&global, &global, 0, 1).unwrap();
    assert!(same.rows.iter().flatten().all(|&v| v == 0.0));
    let other = ModelParams::zeros(&[3, 2]).unwrap();
    assert!(matches!(
        output_layer_delta(&other, &global, 0, 1),
        Err(Error::Config(_))
    ));
}

#[test]
fn output_delta_matches_elementwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let sizes = [4, 5, 3];
    let a = random_net(&sizes, &mut rng);
    let b = random_net(&sizes, &mut rng);
    let delta = output_layer_delta(&a, &b, 7, 2).unwrap();
    // Output layer starts after the 4x5 hidden weights and 5 biases.
    let start = 4 * 5 + 5;
    let (wa, wb) = (&a.as_slice()[start..], &b.as_slice()[start..]);
    for l in 0..3 {
        let mut expect: Vec<f64> = (0..5).map(|i| wa[l * 5 + i] - wb[l * 5 + i]).collect();
        expect.push(wa[15 + l] - wb[15 + l]);
        assert_eq!(delta.rows[l], expect);
    }
    assert_eq!((delta.client, delta.round), (7, 2));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn training_stays_finite_on_bounded_data(seed in any::<u64>(), lr in 0.0f64..=0.1, momentum in 0.0f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 40;
        let features: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-5.0..5.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(1..=3)).collect();
        let data = Dataset::new(3, 3, features, labels).unwrap();
        let global = random_net(&[3, 6, 3], &mut rng);
        let cfg = TrainConfig { learning_rate: lr, momentum, local_epochs: 3, batch_size: 8, seed };
        let local = train_local(&global, &data, &cfg).unwrap();
        prop_assert!(local.is_finite());
        prop_assert!(local.forward(data.features()).unwrap().iter().all(|v| v.is_finite()));
    }
}
