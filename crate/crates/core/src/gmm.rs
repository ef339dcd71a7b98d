//! Two-component diagonal-covariance Gaussian mixture fitted by EM.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmOptions {
    pub max_iter: usize,
    /// EM stops once the log-likelihood gain of an iteration drops below this.
    pub tol: f64,
    pub variance_floor: f64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-8,
            variance_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub weights: [f64; 2],
    pub means: [Vec<f64>; 2],
    pub variances: [Vec<f64>; 2],
    pub iterations: usize,
    pub log_likelihood: f64,
    /// Log-likelihood before the first update and after every EM iteration.
    pub log_likelihood_trace: Vec<f64>,
    /// Set when every input point coincides; such a fit carries no
    /// information about group structure.
    pub degenerate: bool,
}

impl GmmModel {
    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn log_component_density(&self, k: usize, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((xi, mu), var) in x.iter().zip(&self.means[k]).zip(&self.variances[k]) {
            let d = xi - mu;
            acc += (2.0 * PI * var).ln() + d * d / var;
        }
        self.weights[k].ln() - 0.5 * acc
    }

    /// Posterior component probabilities of `x` and its log-density.
    fn posterior(&self, x: &[f64]) -> ([f64; 2], f64) {
        let a = self.log_component_density(0, x);
        let b = self.log_component_density(1, x);
        let max = a.max(b);
        let lse = max + ((a - max).exp() + (b - max).exp()).ln();
        ([(a - lse).exp(), (b - lse).exp()], lse)
    }

    /// Total log-likelihood of `points` under the mixture.
    pub fn log_likelihood_of(&self, points: &[Vec<f64>]) -> f64 {
        points.iter().map(|x| self.posterior(x).1).sum()
    }
}

fn validate_points(points: &[Vec<f64>]) -> Result<usize> {
    if points.len() < 2 {
        return Err(Error::config(format!(
            "gmm needs at least 2 points, got {}",
            points.len()
        )));
    }
    let d = points[0].len();
    if d == 0 {
        return Err(Error::config("gmm points need at least one dimension"));
    }
    if let Some(bad) = points.iter().find(|p| p.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: bad.len(),
        });
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::config("gmm points must be finite"));
    }
    Ok(d)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn lexicographic(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Point farthest from `from`; equal distances go to the lexicographically
/// smaller point, so the choice does not depend on the order of `points`.
fn farthest_from(points: &[Vec<f64>], from: &[f64]) -> (usize, f64) {
    let mut best = (0, squared_distance(&points[0], from));
    for (i, p) in points.iter().enumerate().skip(1) {
        let d = squared_distance(p, from);
        if d > best.1 || (d == best.1 && lexicographic(p, &points[best.0]).is_lt()) {
            best = (i, d);
        }
    }
    best
}

/// Two far-apart seed points in linear time: from the lexicographically
/// smallest point sweep to the farthest point, then sweep once more. An
/// exhaustive pair search would make detection quadratic in the cohort size.
fn seed_pair(points: &[Vec<f64>]) -> (usize, usize, f64) {
    let start = (1..points.len()).fold(0, |m, i| {
        if lexicographic(&points[i], &points[m]).is_lt() {
            i
        } else {
            m
        }
    });
    let (b, _) = farthest_from(points, &points[start]);
    let (a, spread) = farthest_from(points, &points[b]);
    (a, b, spread)
}

/// Fits the mixture. Means start at two far-apart points, variances
/// at the pooled variance averaged over dimensions, weights at one half.
/// Components are returned ordered by the lexicographic order of their means,
/// so the result does not depend on the order of `points`.
pub fn fit(points: &[Vec<f64>], opts: &GmmOptions) -> Result<GmmModel> {
    let d = validate_points(points)?;
    let n = points.len() as f64;
    let floor = opts.variance_floor;

    let (i, j, spread) = seed_pair(points);
    if spread == 0.0 {
        let mean = points[0].clone();
        return Ok(GmmModel {
            weights: [0.5, 0.5],
            means: [mean.clone(), mean],
            variances: [vec![floor; d], vec![floor; d]],
            iterations: 0,
            log_likelihood: f64::NAN,
            log_likelihood_trace: Vec::new(),
            degenerate: true,
        });
    }

    // Isotropic start: per-dimension pooled variances would let noise in
    // near-constant dimensions outvote the direction that separates the
    // seeds, and EM rarely recovers from that first split.
    let centroid: Vec<f64> = (0..d)
        .map(|k| points.iter().map(|p| p[k]).sum::<f64>() / n)
        .collect();
    let total: f64 = points.iter().map(|p| squared_distance(p, &centroid)).sum();
    let pooled = vec![(total / (n * d as f64)).max(floor); d];

    let mut model = GmmModel {
        weights: [0.5, 0.5],
        means: [points[i].clone(), points[j].clone()],
        variances: [pooled.clone(), pooled],
        iterations: 0,
        log_likelihood: 0.0,
        log_likelihood_trace: Vec::new(),
        degenerate: false,
    };

    let (mut resp, mut ll) = e_step(&model, points);
    model.log_likelihood_trace.push(ll);
    for iteration in 1..=opts.max_iter {
        m_step(&mut model, points, &resp, floor);
        let (new_resp, new_ll) = e_step(&model, points);
        debug_assert!(
            new_ll >= ll - 1e-9 * ll.abs().max(1.0),
            "EM log-likelihood decreased: {ll} -> {new_ll}"
        );
        model.log_likelihood_trace.push(new_ll);
        model.iterations = iteration;
        resp = new_resp;
        let gain = new_ll - ll;
        ll = new_ll;
        if gain < opts.tol {
            break;
        }
    }
    model.log_likelihood = ll;

    if model.means[1]
        .iter()
        .zip(&model.means[0])
        .map(|(a, b)| a.total_cmp(b))
        .find(|o| o.is_ne())
        == Some(std::cmp::Ordering::Less)
    {
        model.weights.swap(0, 1);
        model.means.swap(0, 1);
        model.variances.swap(0, 1);
    }
    Ok(model)
}

fn e_step(model: &GmmModel, points: &[Vec<f64>]) -> (Vec<[f64; 2]>, f64) {
    let mut ll = 0.0;
    let resp = points
        .iter()
        .map(|x| {
            let (r, lse) = model.posterior(x);
            ll += lse;
            r
        })
        .collect();
    (resp, ll)
}

fn m_step(model: &mut GmmModel, points: &[Vec<f64>], resp: &[[f64; 2]], floor: f64) {
    let n = points.len() as f64;
    let d = model.dim();
    for k in 0..2 {
        let nk: f64 = resp.iter().map(|r| r[k]).sum();
        if nk < 1e-12 {
            // Component has lost every point; keep its shape and starve it.
            model.weights[k] = f64::MIN_POSITIVE.max(nk / n);
            continue;
        }
        model.weights[k] = nk / n;
        let mut mean = vec![0.0; d];
        for (x, r) in points.iter().zip(resp) {
            for (m, xi) in mean.iter_mut().zip(x) {
                *m += r[k] * xi;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nk);
        let mut var = vec![0.0; d];
        for (x, r) in points.iter().zip(resp) {
            for ((v, xi), m) in var.iter_mut().zip(x).zip(&mean) {
                *v += r[k] * (xi - m) * (xi - m);
            }
        }
        var.iter_mut().for_each(|v| *v = (*v / nk).max(floor));
        model.means[k] = mean;
        model.variances[k] = var;
    }
    let total = model.weights[0] + model.weights[1];
    model.weights[0] /= total;
    model.weights[1] /= total;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Hard label per point: the component with the larger responsibility,
    /// component 0 on exact ties.
    pub labels: Vec<usize>,
    pub responsibilities: Vec<[f64; 2]>,
}

pub fn assign(model: &GmmModel, points: &[Vec<f64>]) -> Result<Assignment> {
    if model.degenerate {
        return Err(Error::Uninformative);
    }
    if let Some(bad) = points.iter().find(|p| p.len() != model.dim()) {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            actual: bad.len(),
        });
    }
    let responsibilities: Vec<[f64; 2]> = points.iter().map(|x| model.posterior(x).0).collect();
    let labels = responsibilities
        .iter()
        .map(|r| usize::from(r[1] > r[0]))
        .collect();
    Ok(Assignment {
        labels,
        responsibilities,
    })
}

/// Mean Euclidean distance from each cluster's members to its component
/// mean; `None` for an empty cluster.
pub fn compactness(model: &GmmModel, points: &[Vec<f64>], labels: &[usize]) -> [Option<f64>; 2] {
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    for (x, &l) in points.iter().zip(labels) {
        sums[l] += squared_distance(x, &model.means[l]).sqrt();
        counts[l] += 1;
    }
    [0, 1].map(|k| (counts[k] > 0).then(|| sums[k] / counts[k] as f64))
}

/// How the poisoned cluster is told apart from the benign one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Density {
    /// Smaller mean distance to the component mean.
    Compactness,
    /// Compactness divided by the norm of the component mean, so a cluster of
    /// large, consistent updates counts as denser than one of small, scattered
    /// ones.
    #[default]
    RelativeCompactness,
}

/// [`compactness`] over the norm of each component mean. A zero-spread
/// cluster scores 0; a spread cluster centered on the origin scores infinity.
pub fn relative_compactness(
    model: &GmmModel,
    points: &[Vec<f64>],
    labels: &[usize],
) -> [Option<f64>; 2] {
    let c = compactness(model, points, labels);
    [0, 1].map(|k| {
        c[k].map(|spread| {
            let norm = model.means[k].iter().map(|v| v * v).sum::<f64>().sqrt();
            if spread == 0.0 {
                0.0
            } else if norm == 0.0 {
                f64::INFINITY
            } else {
                spread / norm
            }
        })
    })
}

/// Distance between the component means over the summed compactness of the
/// two clusters. Infinite when both clusters have zero spread.
pub fn separation(model: &GmmModel, points: &[Vec<f64>], labels: &[usize]) -> Option<f64> {
    let [Some(a), Some(b)] = compactness(model, points, labels) else {
        return None;
    };
    let gap = squared_distance(&model.means[0], &model.means[1]).sqrt();
    Some(if a + b == 0.0 {
        f64::INFINITY
    } else {
        gap / (a + b)
    })
}

/// The more compact of the two clusters. Equal compactness (to a relative
/// 1e-9) falls back to the smaller cluster, then to component 0. Returns
/// `None` when a cluster is empty.
pub fn denser_cluster(model: &GmmModel, points: &[Vec<f64>], labels: &[usize]) -> Option<usize> {
    denser_cluster_by(Density::Compactness, model, points, labels)
}

/// [`denser_cluster`] under the given density measure.
pub fn denser_cluster_by(
    density: Density,
    model: &GmmModel,
    points: &[Vec<f64>],
    labels: &[usize],
) -> Option<usize> {
    let scores = match density {
        Density::Compactness => compactness(model, points, labels),
        Density::RelativeCompactness => relative_compactness(model, points, labels),
    };
    let [Some(a), Some(b)] = scores else {
        return None;
    };
    if a != b && !(a.is_finite() && b.is_finite() && (a - b).abs() <= 1e-9 * a.max(b)) {
        return Some(if a < b { 0 } else { 1 });
    }
    let size1 = labels.iter().filter(|&&l| l == 1).count();
    let size0 = labels.len() - size1;
    Some(if size1 < size0 { 1 } else { 0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(values: &[f64]) -> Vec<Vec<f64>> {
        values.iter().map(|&v| vec![v]).collect()
    }

    #[test]
    fn two_blobs_in_one_dimension() {
        let points = pts(&[-0.1, 0.0, 0.1, 9.9, 10.0, 10.1]);
        let model = fit(&points, &GmmOptions::default()).unwrap();
        assert!((model.means[0][0] - 0.0).abs() < 0.1);
        assert!((model.means[1][0] - 10.0).abs() < 0.1);
        let a = assign(&model, &points).unwrap();
        assert_eq!(a.labels, vec![0, 0, 0, 1, 1, 1]);
        for r in &a.responsibilities {
            assert!((r[0] + r[1] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn two_points_own_one_component_each() {
        let points = vec![vec![3.0, -1.0], vec![1.0, 2.0]];
        let model = fit(&points, &GmmOptions::default()).unwrap();
        assert_eq!(model.means[0], vec![1.0, 2.0]);
        assert_eq!(model.means[1], vec![3.0, -1.0]);
    }

    #[test]
    fn identical_points_are_degenerate() {
        let points = vec![vec![1.0, 2.0]; 4];
        let model = fit(&points, &GmmOptions::default()).unwrap();
        assert!(model.degenerate);
        assert_eq!(model.means[0], model.means[1]);
        assert_eq!(model.variances[0], vec![1e-6; 2]);
        assert_eq!(assign(&model, &points), Err(Error::Uninformative));
    }

    #[test]
    fn rejects_too_few_or_ragged_points() {
        assert!(fit(&pts(&[1.0]), &GmmOptions::default()).is_err());
        assert!(fit(&[vec![1.0], vec![1.0, 2.0]], &GmmOptions::default()).is_err());
        assert!(fit(&[vec![], vec![]], &GmmOptions::default()).is_err());
    }

    #[test]
    fn point_at_component_mean_is_confident() {
        let points = pts(&[-0.1, 0.0, 0.1, 9.9, 10.0, 10.1]);
        let model = fit(&points, &GmmOptions::default()).unwrap();
        let a = assign(&model, &[model.means[1].clone()]).unwrap();
        assert_eq!(a.labels, vec![1]);
        assert!(a.responsibilities[0][1] > 0.99);
    }

    #[test]
    fn symmetric_model_splits_midpoint_evenly() {
        let model = GmmModel {
            weights: [0.5, 0.5],
            means: [vec![-1.0], vec![1.0]],
            variances: [vec![0.5], vec![0.5]],
            iterations: 0,
            log_likelihood: 0.0,
            log_likelihood_trace: vec![],
            degenerate: false,
        };
        let a = assign(&model, &[vec![0.0]]).unwrap();
        let [r0, r1] = a.responsibilities[0];
        assert!((r0 - 0.5).abs() < 1e-12 && (r1 - 0.5).abs() < 1e-12);
        assert_eq!(a.labels, vec![0]);
    }

    fn ring(center: (f64, f64), radius: f64, n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / n as f64;
                vec![center.0 + radius * t.cos(), center.1 + radius * t.sin()]
            })
            .collect()
    }

    fn hard_model(a: &[Vec<f64>], b: &[Vec<f64>]) -> (GmmModel, Vec<Vec<f64>>, Vec<usize>) {
        let mean = |p: &[Vec<f64>]| {
            (0..2)
                .map(|k| p.iter().map(|x| x[k]).sum::<f64>() / p.len() as f64)
                .collect::<Vec<_>>()
        };
        let model = GmmModel {
            weights: [0.5, 0.5],
            means: [mean(a), mean(b)],
            variances: [vec![1.0; 2], vec![1.0; 2]],
            iterations: 0,
            log_likelihood: 0.0,
            log_likelihood_trace: vec![],
            degenerate: false,
        };
        let mut points = a.to_vec();
        points.extend_from_slice(b);
        let labels = [vec![0; a.len()], vec![1; b.len()]].concat();
        (model, points, labels)
    }

    #[test]
    fn denser_prefers_compact_cluster() {
        let (model, points, labels) =
            hard_model(&ring((0.0, 0.0), 0.01, 5), &ring((20.0, 0.0), 5.0, 5));
        assert_eq!(denser_cluster(&model, &points, &labels), Some(0));
        let (model, points, labels) =
            hard_model(&ring((0.0, 0.0), 5.0, 5), &ring((20.0, 0.0), 0.01, 5));
        assert_eq!(denser_cluster(&model, &points, &labels), Some(1));
    }

    #[test]
    fn denser_tie_prefers_smaller_cluster_then_component_zero() {
        let (model, points, labels) =
            hard_model(&ring((0.0, 0.0), 1.0, 7), &ring((10.0, 0.0), 1.0, 3));
        assert_eq!(denser_cluster(&model, &points, &labels), Some(1));
        let (model, points, labels) =
            hard_model(&ring((0.0, 0.0), 1.0, 4), &ring((10.0, 0.0), 1.0, 4));
        assert_eq!(denser_cluster(&model, &points, &labels), Some(0));
    }

    #[test]
    fn denser_with_empty_cluster_is_none() {
        let (model, points, _) = hard_model(&ring((0.0, 0.0), 1.0, 3), &ring((10.0, 0.0), 1.0, 3));
        assert_eq!(denser_cluster(&model, &points, &[0; 6]), None);
    }
}
