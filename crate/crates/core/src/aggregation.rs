//! Global aggregation rules: uniform FedAvg and the robust baselines Krum,
//! coordinate-wise trimmed mean, coordinate-wise median and FoolsGold.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ModelParams, OutputDelta};

/// Server-side aggregation strategy.
///
/// `None` parameters for Krum and trimmed mean are filled in from the
/// expected number of malicious cohort members when a run is configured.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum AggregatorKind {
    FedAvg,
    Krum {
        #[serde(default)]
        assumed_byzantine: Option<usize>,
    },
    #[serde(rename = "tmean")]
    TrimmedMean {
        #[serde(default)]
        trim_count: Option<usize>,
    },
    Median,
    FoolsGold,
    Defend,
}

impl AggregatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            AggregatorKind::FedAvg => "fedavg",
            AggregatorKind::Krum { .. } => "krum",
            AggregatorKind::TrimmedMean { .. } => "tmean",
            AggregatorKind::Median => "median",
            AggregatorKind::FoolsGold => "foolsgold",
            AggregatorKind::Defend => "defend",
        }
    }

    /// Parses the short names used on the command line.
    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "fedavg" => AggregatorKind::FedAvg,
            "krum" => AggregatorKind::Krum {
                assumed_byzantine: None,
            },
            "tmean" => AggregatorKind::TrimmedMean { trim_count: None },
            "median" => AggregatorKind::Median,
            "foolsgold" => AggregatorKind::FoolsGold,
            "defend" => AggregatorKind::Defend,
            _ => return None,
        })
    }

    /// Checks strategy parameters against the cohort size `m`.
    pub fn validate(&self, m: usize) -> Result<()> {
        match *self {
            AggregatorKind::Krum {
                assumed_byzantine: Some(f),
            } if m < f + 3 => Err(Error::config(format!(
                "krum with {f} assumed byzantine clients needs a cohort of at least {}, got {m}",
                f + 3
            ))),
            AggregatorKind::TrimmedMean {
                trim_count: Some(b),
            } if b >= m / 2 => Err(Error::config(format!(
                "tmean trim_count {b} must be below floor(M/2) = {}",
                m / 2
            ))),
            _ => Ok(()),
        }
    }
}

fn check_models(models: &[ModelParams]) -> Result<&ModelParams> {
    let first = models.first().ok_or(Error::EmptyCohort)?;
    if let Some(bad) = models.iter().find(|m| !m.same_architecture(first)) {
        return Err(Error::config(format!(
            "architecture mismatch: {:?} vs {:?}",
            first.layer_sizes(),
            bad.layer_sizes()
        )));
    }
    Ok(first)
}

/// Coordinate-wise mean with weight `1/M`. Deviations from the first model
/// are averaged, so identical inputs come back bit for bit.
pub fn fedavg(models: &[ModelParams]) -> Result<ModelParams> {
    mean_of(&models.iter().collect::<Vec<_>>())
}

/// [`fedavg`] over borrowed models.
pub fn mean_of(models: &[&ModelParams]) -> Result<ModelParams> {
    let first = *models.first().ok_or(Error::EmptyCohort)?;
    if let Some(bad) = models.iter().find(|m| !m.same_architecture(first)) {
        return Err(Error::config(format!(
            "architecture mismatch: {:?} vs {:?}",
            first.layer_sizes(),
            bad.layer_sizes()
        )));
    }
    let scale = 1.0 / models.len() as f64;
    let base = first.as_slice();
    let mut out = vec![0.0; first.len()];
    for model in &models[1..] {
        for ((o, p), b) in out.iter_mut().zip(model.as_slice()).zip(base) {
            *o += p - b;
        }
    }
    out.iter_mut()
        .zip(base)
        .for_each(|(o, b)| *o = b + *o * scale);
    first.with_params(out)
}

/// Weighted mean with weights normalised to sum to one. All-zero weights
/// leave nothing to aggregate.
pub fn weighted_average(models: &[ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let first = check_models(models)?;
    if weights.len() != models.len() {
        return Err(Error::DimensionMismatch {
            expected: models.len(),
            actual: weights.len(),
        });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::config(
            "aggregation weights must be finite and non-negative",
        ));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::EmptyCohort);
    }
    let mut out = vec![0.0; first.len()];
    for (model, w) in models.iter().zip(weights) {
        if *w == 0.0 {
            continue;
        }
        let w = w / total;
        for (o, p) in out.iter_mut().zip(model.as_slice()) {
            *o += w * p;
        }
    }
    first.with_params(out)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Krum scores: for each model, the sum of squared distances to its
/// `M - f - 2` nearest other models.
pub fn krum_scores(models: &[ModelParams], assumed_byzantine: usize) -> Result<Vec<f64>> {
    check_models(models)?;
    let m = models.len();
    if m < assumed_byzantine + 3 {
        return Err(Error::config(format!(
            "krum needs at least f + 3 = {} models, got {m}",
            assumed_byzantine + 3
        )));
    }
    let neighbours = m - assumed_byzantine - 2;
    let mut dist = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in i + 1..m {
            let d = squared_distance(models[i].as_slice(), models[j].as_slice());
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    Ok((0..m)
        .map(|i| {
            let mut others: Vec<f64> = (0..m).filter(|&j| j != i).map(|j| dist[i][j]).collect();
            others.sort_by(f64::total_cmp);
            others[..neighbours].iter().sum()
        })
        .collect())
}

/// Index of the Krum-selected model; ties go to the lowest index.
pub fn krum_select(models: &[ModelParams], assumed_byzantine: usize) -> Result<usize> {
    let scores = krum_scores(models, assumed_byzantine)?;
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s < scores[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn krum(models: &[ModelParams], assumed_byzantine: usize) -> Result<ModelParams> {
    Ok(models[krum_select(models, assumed_byzantine)?].clone())
}

/// Applies `reduce` to the sorted values of every coordinate.
fn per_coordinate<F>(models: &[ModelParams], reduce: F) -> Result<ModelParams>
where
    F: Fn(&[f64]) -> f64,
{
    let first = check_models(models)?;
    let mut column = vec![0.0; models.len()];
    let out = (0..first.len())
        .map(|i| {
            for (c, m) in column.iter_mut().zip(models) {
                *c = m.as_slice()[i];
            }
            column.sort_by(f64::total_cmp);
            reduce(&column)
        })
        .collect();
    first.with_params(out)
}

/// Per coordinate, drop the `trim_count` smallest and largest values and
/// average the rest.
pub fn trimmed_mean(models: &[ModelParams], trim_count: usize) -> Result<ModelParams> {
    let m = models.len();
    if m > 0 && m <= 2 * trim_count {
        return Err(Error::config(format!(
            "trimmed mean with trim_count {trim_count} needs more than {} models, got {m}",
            2 * trim_count
        )));
    }
    per_coordinate(models, |sorted| {
        let kept = &sorted[trim_count..sorted.len() - trim_count];
        kept.iter().sum::<f64>() / kept.len() as f64
    })
}

/// Per-coordinate median; an even count averages the two middle values.
pub fn coordinate_median(models: &[ModelParams]) -> Result<ModelParams> {
    per_coordinate(models, |sorted| {
        let n = sorted.len();
        if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        }
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// FoolsGold client weights in `[0, 1]` from accumulated update histories.
///
/// Pairwise cosine similarity, pardoning of clients whose maximum similarity
/// is below their partner's, inverted maximum similarity, rescale so the best
/// client sits at 0.99, then logit squashing `ln(w / (1 - w)) + 0.5` clamped
/// to `[0, 1]`. A zero-norm history has similarity 0 to everyone.
pub fn foolsgold_weights(histories: &[Vec<f64>]) -> Vec<f64> {
    let n = histories.len();
    if n == 0 {
        return Vec::new();
    }
    let mut cs = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let c = cosine(&histories[i], &histories[j]);
            cs[i][j] = c;
            cs[j][i] = c;
        }
    }
    let max_cs: Vec<f64> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| cs[i][j])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .map(|v| if v.is_finite() { v } else { 0.0 })
        .collect();
    for i in 0..n {
        for j in 0..n {
            if i != j && max_cs[i] < max_cs[j] && max_cs[j] > 0.0 {
                cs[i][j] *= max_cs[i] / max_cs[j];
            }
        }
    }
    let mut weights: Vec<f64> = (0..n)
        .map(|i| {
            let max = (0..n)
                .filter(|&j| j != i)
                .map(|j| cs[i][j])
                .fold(f64::NEG_INFINITY, f64::max);
            let max = if max.is_finite() { max } else { 0.0 };
            (1.0 - max).clamp(0.0, 1.0)
        })
        .collect();
    let top = weights.iter().cloned().fold(0.0, f64::max);
    if top == 0.0 {
        return vec![0.0; n];
    }
    for w in &mut weights {
        *w /= top;
        if *w >= 1.0 {
            *w = 0.99;
        }
        *w = if *w <= 0.0 {
            0.0
        } else {
            ((*w / (1.0 - *w)).ln() + 0.5).clamp(0.0, 1.0)
        };
    }
    weights
}

/// Per-client sums of flattened output-layer deltas across rounds.
#[derive(Debug, Clone, Default)]
pub struct FoolsGoldHistory {
    history: BTreeMap<usize, Vec<f64>>,
}

impl FoolsGoldHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Folds this round's deltas into the history and returns the weights of
    /// the clients in `deltas` order.
    pub fn update(&mut self, deltas: &[OutputDelta]) -> Vec<f64> {
        for delta in deltas {
            let flat = delta.flatten();
            let entry = self
                .history
                .entry(delta.client)
                .or_insert_with(|| vec![0.0; flat.len()]);
            for (h, d) in entry.iter_mut().zip(&flat) {
                *h += d;
            }
        }
        let histories: Vec<Vec<f64>> = deltas
            .iter()
            .map(|d| self.history[&d.client].clone())
            .collect();
        foolsgold_weights(&histories)
    }
}
