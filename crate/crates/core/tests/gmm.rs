use defend_core::gmm::{
    assign, compactness, denser_cluster, denser_cluster_by, fit, relative_compactness, separation,
    Density, GmmModel, GmmOptions,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Textbook EM in probability space with the same initialisation and stopping
/// rule as the library: seed means found by two farthest-point sweeps from
/// the lexicographically smallest point, one pooled variance, equal weights. Returns the final log-likelihood and its per-iteration
/// sequence.
fn reference_em(points: &[Vec<f64>], max_iter: usize, tol: f64, floor: f64) -> (f64, Vec<f64>) {
    let n = points.len();
    let d = points[0].len();
    let dist = |p: &[f64], q: &[f64]| -> f64 { (0..d).map(|k| (p[k] - q[k]).powi(2)).sum() };
    let mut sorted: Vec<usize> = (0..n).collect();
    sorted.sort_by(|&i, &j| {
        points[i]
            .iter()
            .zip(&points[j])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    // Farthest from `from`, scanning in lexicographic order so the first
    // maximum is the lexicographically smallest one.
    let farthest = |from: usize| -> usize {
        let mut best = sorted[0];
        for &i in &sorted {
            if dist(&points[i], &points[from]) > dist(&points[best], &points[from]) {
                best = i;
            }
        }
        best
    };
    let b = farthest(sorted[0]);
    let a = farthest(b);
    let mut mean = [points[a].clone(), points[b].clone()];
    let centroid: Vec<f64> = (0..d)
        .map(|k| points.iter().map(|p| p[k]).sum::<f64>() / n as f64)
        .collect();
    let per_dim: Vec<f64> = (0..d)
        .map(|k| {
            points
                .iter()
                .map(|p| (p[k] - centroid[k]).powi(2))
                .sum::<f64>()
                / n as f64
        })
        .collect();
    let pooled = (per_dim.iter().sum::<f64>() / d as f64).max(floor);
    let mut var = [vec![pooled; d], vec![pooled; d]];
    let mut pi = [0.5, 0.5];

    let density = |x: &[f64], m: &[f64], v: &[f64]| -> f64 {
        (0..d)
            .map(|k| {
                (-(x[k] - m[k]).powi(2) / (2.0 * v[k])).exp()
                    / (2.0 * std::f64::consts::PI * v[k]).sqrt()
            })
            .product()
    };
    let e_step = |pi: &[f64; 2], mean: &[Vec<f64>; 2], var: &[Vec<f64>; 2]| {
        let mut ll = 0.0;
        let resp: Vec<[f64; 2]> = points
            .iter()
            .map(|x| {
                let p = [
                    pi[0] * density(x, &mean[0], &var[0]),
                    pi[1] * density(x, &mean[1], &var[1]),
                ];
                ll += (p[0] + p[1]).ln();
                [p[0] / (p[0] + p[1]), p[1] / (p[0] + p[1])]
            })
            .collect();
        (resp, ll)
    };

    let (mut resp, mut ll) = e_step(&pi, &mean, &var);
    let mut trace = vec![ll];
    for _ in 0..max_iter {
        for c in 0..2 {
            let nc: f64 = resp.iter().map(|r| r[c]).sum();
            pi[c] = nc / n as f64;
            mean[c] = (0..d)
                .map(|k| {
                    points
                        .iter()
                        .zip(&resp)
                        .map(|(x, r)| r[c] * x[k])
                        .sum::<f64>()
                        / nc
                })
                .collect();
            var[c] = (0..d)
                .map(|k| {
                    let v = points
                        .iter()
                        .zip(&resp)
                        .map(|(x, r)| r[c] * (x[k] - mean[c][k]).powi(2))
                        .sum::<f64>()
                        / nc;
                    v.max(floor)
                })
                .collect();
        }
        let (new_resp, new_ll) = e_step(&pi, &mean, &var);
        trace.push(new_ll);
        let gain = new_ll - ll;
        resp = new_resp;
        ll = new_ll;
        if gain < tol {
            break;
        }
    }
    (ll, trace)
}

fn blob_dataset(seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..4);
    let (n0, n1) = (rng.random_range(3..8), rng.random_range(3..8));
    let offset: Vec<f64> = (0..d).map(|_| rng.random_range(2.0..5.0)).collect();
    let mut points = Vec::new();
    for i in 0..n0 + n1 {
        let shift = if i < n0 { 0.0 } else { 1.0 };
        points.push(
            (0..d)
                .map(|k| shift * offset[k] + rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
    }
    points
}

#[test]
fn log_likelihood_matches_reference_em_on_ten_datasets() {
    let opts = GmmOptions::default();
    for seed in 0..10 {
        let points = blob_dataset(seed);
        let model = fit(&points, &opts).unwrap();
        let (reference, _) = reference_em(&points, opts.max_iter, opts.tol, opts.variance_floor);
        assert!(
            (model.log_likelihood - reference).abs() < 1e-6,
            "dataset {seed}: {} vs {reference}",
            model.log_likelihood
        );
        assert!((model.log_likelihood - model.log_likelihood_of(&points)).abs() < 1e-9);
    }
}

#[test]
fn em_is_monotone_per_iteration() {
    for seed in 0..10 {
        let points = blob_dataset(seed);
        let trace = fit(&points, &GmmOptions::default())
            .unwrap()
            .log_likelihood_trace;
        for w in trace.windows(2) {
            assert!(
                w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0),
                "dataset {seed}: {} -> {}",
                w[0],
                w[1]
            );
        }
        let (_, reference) = reference_em(&points, 200, 1e-8, 1e-6);
        for w in reference.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0));
        }
    }
}

fn one_dim(values: &[f64]) -> Vec<Vec<f64>> {
    values.iter().map(|&v| vec![v]).collect()
}

#[test]
fn zero_ten_example_splits_three_and_three() {
    let points = one_dim(&[-0.1, 0.0, 0.1, 9.9, 10.0, 10.1]);
    let model = fit(&points, &GmmOptions::default()).unwrap();
    let (reference, _) = reference_em(&points, 200, 1e-8, 1e-6);
    assert!((model.log_likelihood - reference).abs() < 1e-6);
    let a = assign(&model, &points).unwrap();
    assert_eq!(a.labels, vec![0, 0, 0, 1, 1, 1]);
    for r in &a.responsibilities {
        assert!((r[0] + r[1] - 1.0).abs() < 1e-9);
    }
    let at_mean = assign(&model, &[model.means[1].clone()]).unwrap();
    assert_eq!(at_mean.labels, vec![1]);
    assert!(at_mean.responsibilities[0][1] > 0.99);
}

fn blobs(per: usize, d: usize, gap: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    let mut truth = Vec::new();
    for i in 0..2 * per {
        let group = i % 2;
        let center = |k: usize| if k == 0 { gap * group as f64 } else { 0.0 };
        points.push(
            (0..d)
                .map(|k| center(k) + 0.1 * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
        truth.push(group);
    }
    (points, truth)
}

#[test]
fn well_separated_blobs_recover_the_planted_partition() {
    for seed in 0..5 {
        // Spread 0.1 per coordinate, centers 2.0 apart: 20x the spread.
        let (points, truth) = blobs(8, 3, 2.0, seed);
        let labels = assign(&fit(&points, &GmmOptions::default()).unwrap(), &points)
            .unwrap()
            .labels;
        let agrees = labels == truth;
        let flipped = labels.iter().zip(&truth).all(|(l, t)| l != t);
        assert!(agrees || flipped, "seed {seed}: {labels:?}");
    }
}

#[test]
fn density_measures_and_separation() {
    // Tight cluster far from the origin, loose cluster around it.
    let mut points = vec![vec![10.0, 10.0], vec![10.01, 10.0], vec![10.0, 10.01]];
    points.extend([
        vec![-3.0, 0.0],
        vec![3.0, 0.0],
        vec![0.0, 3.0],
        vec![0.0, -3.0],
    ]);
    let model = fit(&points, &GmmOptions::default()).unwrap();
    let labels = assign(&model, &points).unwrap().labels;
    let tight = labels[0];
    assert!(labels[..3].iter().all(|&l| l == tight) && labels[3..].iter().all(|&l| l != tight));
    assert_eq!(denser_cluster(&model, &points, &labels), Some(tight));
    assert_eq!(
        denser_cluster_by(Density::RelativeCompactness, &model, &points, &labels),
        Some(tight)
    );

    let c = compactness(&model, &points, &labels);
    let r = relative_compactness(&model, &points, &labels);
    for k in 0..2 {
        let norm = model.means[k].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((r[k].unwrap() - c[k].unwrap() / norm).abs() < 1e-12);
    }
    let gap = model.means[0]
        .iter()
        .zip(&model.means[1])
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let s = separation(&model, &points, &labels).unwrap();
    assert!((s - gap / (c[0].unwrap() + c[1].unwrap())).abs() < 1e-12);
}

#[test]
fn relative_density_prefers_large_consistent_updates() {
    // Small scattered deltas near zero against a looser but far-off group:
    // raw compactness picks the small group, relative compactness the far one.
    let mut points: Vec<Vec<f64>> = (0..6)
        .map(|i| vec![0.1 * (i as f64 - 2.5), 0.05 * (i % 2) as f64])
        .collect();
    points.extend((0..4).map(|i| vec![20.0 + 0.5 * i as f64, 20.0 - 0.5 * i as f64]));
    let model = fit(&points, &GmmOptions::default()).unwrap();
    let labels = assign(&model, &points).unwrap().labels;
    let (near, far) = (labels[0], labels[6]);
    assert_ne!(near, far);
    assert_eq!(
        denser_cluster_by(Density::Compactness, &model, &points, &labels),
        Some(near)
    );
    assert_eq!(
        denser_cluster_by(Density::RelativeCompactness, &model, &points, &labels),
        Some(far)
    );
}

#[test]
fn degenerate_and_tied_cases() {
    let same = one_dim(&[2.0, 2.0, 2.0]);
    let model = fit(&same, &GmmOptions::default()).unwrap();
    assert!(model.degenerate);
    assert!(assign(&model, &same).is_err());

    let model = fit(&one_dim(&[1.0, 4.0]), &GmmOptions::default()).unwrap();
    assert!((model.means[0][0] - 1.0).abs() < 1e-9 && (model.means[1][0] - 4.0).abs() < 1e-9);

    // Hand-built model: both clusters sit exactly 1 from their means.
    let model = GmmModel {
        weights: [0.3, 0.7],
        means: [vec![0.0], vec![10.0]],
        variances: [vec![1.0], vec![1.0]],
        iterations: 0,
        log_likelihood: 0.0,
        log_likelihood_trace: Vec::new(),
        degenerate: false,
    };
    let pts = one_dim(&[-1.0, 1.0, 1.0, 9.0, 11.0, 9.0, 11.0, 9.0, 11.0, 11.0]);
    let labels = [0, 0, 0, 1, 1, 1, 1, 1, 1, 1];
    assert_eq!(denser_cluster(&model, &pts, &labels), Some(0));
    let swapped: Vec<usize> = labels.iter().map(|l| 1 - l).collect();
    let mirrored = GmmModel {
        means: [vec![10.0], vec![0.0]],
        ..model.clone()
    };
    assert_eq!(denser_cluster(&mirrored, &pts, &swapped), Some(1));
    // Same spread, same size: component 0.
    let even = one_dim(&[-1.0, 1.0, 9.0, 11.0]);
    assert_eq!(denser_cluster(&model, &even, &[0, 0, 1, 1]), Some(0));
    assert_eq!(denser_cluster(&mirrored, &even, &[1, 1, 0, 0]), Some(0));
    assert_eq!(denser_cluster(&model, &pts, &[0; 10]), None);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn permuting_rows_permutes_labels(seed in any::<u64>(), n in 4usize..14) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<Vec<f64>> = (0..n)
            .map(|i| vec![if i % 3 == 0 { 6.0 } else { 0.0 } + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let shuffled: Vec<Vec<f64>> = order.iter().map(|&i| points[i].clone()).collect();
        let a = fit(&points, &GmmOptions::default()).unwrap();
        let b = fit(&shuffled, &GmmOptions::default()).unwrap();
        let la = assign(&a, &points).unwrap().labels;
        let lb = assign(&b, &shuffled).unwrap().labels;
        // Seed points are chosen by value, not position, so only the
        // labels' order changes.
        for (pos, &i) in order.iter().enumerate() {
            prop_assert_eq!(lb[pos], la[i]);
        }
        prop_assert!((a.log_likelihood - b.log_likelihood).abs() < 1e-6 * a.log_likelihood.abs().max(1.0));
    }

    #[test]
    fn fit_invariants_hold(seed in any::<u64>(), n in 2usize..12, d in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let model = fit(&points, &GmmOptions::default()).unwrap();
        prop_assert!((model.weights[0] + model.weights[1] - 1.0).abs() < 1e-12);
        prop_assert!(model.variances.iter().flatten().all(|&v| v >= 1e-6));
        prop_assert_eq!(&model, &fit(&points, &GmmOptions::default()).unwrap());
        let a = assign(&model, &points).unwrap();
        for r in &a.responsibilities {
            prop_assert!((r[0] + r[1] - 1.0).abs() < 1e-9);
        }
    }
}
