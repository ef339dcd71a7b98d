//! Synthetic Gaussian classification tasks, Dirichlet non-IID partitioning
//! and targeted label flipping.

use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Row-major feature matrix with 1-based class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    dim: usize,
    classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, classes: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || classes == 0 {
            return Err(Error::config(
                "dataset needs a positive feature width and class count",
            ));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * dim,
                actual: features.len(),
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l == 0 || l > classes) {
            return Err(Error::config(format!("label {bad} outside 1..={classes}")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("feature values must be finite"));
        }
        Ok(Self {
            dim,
            classes,
            features,
            labels,
        })
    }

    pub fn empty(dim: usize, classes: usize) -> Self {
        Self {
            dim,
            classes,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn class_count(&self, class: usize) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    /// New dataset made of the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self {
            dim: self.dim,
            classes: self.classes,
            features,
            labels,
        }
    }

    /// CSV with header `f1,...,f<dim>,label`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let header: Vec<String> = (1..=self.dim).map(|i| format!("f{i}")).collect();
        writeln!(out, "{},label", header.join(","))?;
        for i in 0..self.len() {
            for v in self.row(i) {
                write!(out, "{v},")?;
            }
            writeln!(out, "{}", self.labels[i])?;
        }
        Ok(())
    }
}

/// Class-conditional isotropic Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub classes: usize,
    pub dim: usize,
    pub centers: Vec<Vec<f64>>,
    pub spreads: Vec<f64>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl TaskSpec {
    /// Centers drawn i.i.d. `N(0, center_scale^2)` per coordinate from `seed`,
    /// every class sharing the same spread.
    pub fn random_centers(
        classes: usize,
        dim: usize,
        center_scale: f64,
        spread: f64,
        train_per_class: usize,
        test_per_class: usize,
        seed: u64,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, center_scale)
            .map_err(|e| Error::config(format!("center_scale: {e}")))?;
        let mut rng = rng::stream(seed, Purpose::Task, 0, 0);
        let centers = (0..classes)
            .map(|_| (0..dim).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let spec = Self {
            classes,
            dim,
            centers,
            spreads: vec![spread; classes],
            train_per_class,
            test_per_class,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Centers on mutually orthogonal random directions, every pair exactly
    /// `distance` apart. Needs `classes <= dim`.
    pub fn equidistant_centers(
        classes: usize,
        dim: usize,
        distance: f64,
        spread: f64,
        train_per_class: usize,
        test_per_class: usize,
        seed: u64,
    ) -> Result<Self> {
        if classes > dim {
            return Err(Error::config(format!(
                "equidistant centers need classes <= dim, got {classes} > {dim}"
            )));
        }
        if !(distance.is_finite() && distance > 0.0) {
            return Err(Error::config(format!(
                "center distance must be positive, got {distance}"
            )));
        }
        let mut rng = rng::stream(seed, Purpose::Task, 0, 0);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(classes);
        while basis.len() < classes {
            let mut v: Vec<f64> = (0..dim)
                .map(|_| rng.sample(rand_distr::StandardNormal))
                .collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                basis.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        let radius = distance / std::f64::consts::SQRT_2;
        let centers = basis
            .into_iter()
            .map(|b| b.into_iter().map(|x| x * radius).collect())
            .collect();
        let spec = Self {
            classes,
            dim,
            centers,
            spreads: vec![spread; classes],
            train_per_class,
            test_per_class,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Moves the center of class `b` along the line to class `a` until the two
    /// are `distance` apart. Classes are 1-based.
    pub fn with_close_pair(mut self, a: usize, b: usize, distance: f64) -> Result<Self> {
        if a == 0 || b == 0 || a > self.classes || b > self.classes || a == b {
            return Err(Error::config(format!(
                "close pair ({a}, {b}) must name two distinct classes in 1..={}",
                self.classes
            )));
        }
        if !(distance.is_finite() && distance > 0.0) {
            return Err(Error::config(format!(
                "close pair distance must be positive, got {distance}"
            )));
        }
        let (ca, cb) = (&self.centers[a - 1], &self.centers[b - 1]);
        let current = ca
            .iter()
            .zip(cb)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let moved = ca
            .iter()
            .zip(cb)
            .map(|(x, y)| x + (y - x) * distance / current)
            .collect();
        self.centers[b - 1] = moved;
        self.validate()?;
        Ok(self)
    }

    /// Held-out server validation samples per class: a tenth of the test size.
    pub fn val_per_class(&self) -> usize {
        self.test_per_class.div_ceil(10)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 3 {
            return Err(Error::config(format!(
                "task needs at least 3 classes, got {}",
                self.classes
            )));
        }
        if self.dim == 0 {
            return Err(Error::config("task feature dimension must be positive"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::config(
                "task needs a positive number of train and test samples per class",
            ));
        }
        if self.centers.len() != self.classes || self.spreads.len() != self.classes {
            return Err(Error::config(
                "task needs one center and one spread per class",
            ));
        }
        if self
            .centers
            .iter()
            .any(|c| c.len() != self.dim || c.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::config(
                "every center must be a finite vector of the feature dimension",
            ));
        }
        if self.spreads.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::config("spreads must be positive"));
        }
        for i in 0..self.classes {
            for j in i + 1..self.classes {
                if self.centers[i] == self.centers[j] {
                    return Err(Error::config(format!(
                        "classes {} and {} share a center",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        Ok(())
    }

    fn draw<R: Rng>(&self, per_class: usize, rng: &mut R) -> Dataset {
        let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(per_class * self.classes);
        for (c, (center, &spread)) in self.centers.iter().zip(&self.spreads).enumerate() {
            let noise = Normal::new(0.0, spread).expect("validated spread");
            for _ in 0..per_class {
                rows.push((
                    center.iter().map(|m| m + noise.sample(rng)).collect(),
                    c + 1,
                ));
            }
        }
        rows.shuffle(rng);
        let labels = rows.iter().map(|r| r.1).collect();
        let features = rows.into_iter().flat_map(|r| r.0).collect();
        Dataset {
            dim: self.dim,
            classes: self.classes,
            features,
            labels,
        }
    }
}

/// Clean splits of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplits {
    pub train: Dataset,
    pub server_val: Dataset,
    pub test: Dataset,
}

pub fn generate_task(spec: &TaskSpec) -> Result<TaskSplits> {
    spec.validate()?;
    let train = spec.draw(
        spec.train_per_class,
        &mut rng::stream(spec.seed, Purpose::Task, 1, 0),
    );
    let server_val = spec.draw(
        spec.val_per_class(),
        &mut rng::stream(spec.seed, Purpose::Task, 2, 0),
    );
    let test = spec.draw(
        spec.test_per_class,
        &mut rng::stream(spec.seed, Purpose::Task, 3, 0),
    );
    Ok(TaskSplits {
        train,
        server_val,
        test,
    })
}

/// Draw from a symmetric Dirichlet via normalised Gamma variates. If every
/// variate underflows (tiny `alpha`) all mass goes to one uniform index.
fn sample_dirichlet<R: Rng>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter_mut().for_each(|d| *d /= total);
    } else {
        draws.iter_mut().for_each(|d| *d = 0.0);
        draws[rng.random_range(0..k)] = 1.0;
    }
    draws
}

/// Per-client index lists. For every class, its samples are shuffled and cut
/// into `clients` consecutive pieces sized by a `Dirichlet(alpha)` draw.
pub fn dirichlet_partition_indices<R: Rng>(
    train: &Dataset,
    clients: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if clients == 0 {
        return Err(Error::config("partition needs at least one client"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config(format!(
            "dirichlet alpha must be positive, got {alpha}"
        )));
    }
    if train.is_empty() {
        return Err(Error::config("cannot partition an empty training set"));
    }
    let mut shards = vec![Vec::new(); clients];
    for class in 1..=train.classes() {
        let mut members: Vec<usize> = (0..train.len())
            .filter(|&i| train.label(i) == class)
            .collect();
        members.shuffle(rng);
        let proportions = sample_dirichlet(alpha, clients, rng);
        let n = members.len();
        let mut cumulative = 0.0;
        let mut start = 0;
        for (client, p) in proportions.iter().enumerate() {
            cumulative += p;
            let end = if client + 1 == clients {
                n
            } else {
                ((cumulative * n as f64).round() as usize).clamp(start, n)
            };
            shards[client].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    for shard in &mut shards {
        shard.sort_unstable();
    }
    Ok(shards)
}

pub fn dirichlet_partition<R: Rng>(
    train: &Dataset,
    clients: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<Dataset>> {
    let indices = dirichlet_partition_indices(train, clients, alpha, rng)?;
    Ok(indices.iter().map(|idx| train.subset(idx)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMode {
    #[default]
    None,
    Static,
    Adaptive,
}

/// One source-to-target relabeling, optionally limited to an inclusive range
/// of rounds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlipPair {
    pub source: usize,
    pub target: usize,
    #[serde(default)]
    pub rounds: Option<(usize, usize)>,
}

impl FlipPair {
    pub fn new(source: usize, target: usize) -> Self {
        Self {
            source,
            target,
            rounds: None,
        }
    }

    pub fn during(mut self, first: usize, last: usize) -> Self {
        self.rounds = Some((first, last));
        self
    }

    fn active_at(&self, round: usize) -> bool {
        self.rounds
            .is_none_or(|(first, last)| (first..=last).contains(&round))
    }
}

fn default_flip_fraction() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    #[serde(default)]
    pub mode: AttackMode,
    #[serde(default)]
    pub pairs: Vec<FlipPair>,
    #[serde(default = "default_flip_fraction")]
    pub flip_fraction: f64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl AttackSpec {
    pub fn none() -> Self {
        Self {
            mode: AttackMode::None,
            pairs: Vec::new(),
            flip_fraction: 1.0,
        }
    }

    pub fn flip(source: usize, target: usize) -> Self {
        Self {
            mode: AttackMode::Static,
            pairs: vec![FlipPair::new(source, target)],
            flip_fraction: 1.0,
        }
    }

    pub fn adaptive(pairs: Vec<FlipPair>) -> Self {
        Self {
            mode: AttackMode::Adaptive,
            pairs,
            flip_fraction: 1.0,
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.mode == AttackMode::None {
            return Ok(());
        }
        if !(self.flip_fraction > 0.0 && self.flip_fraction <= 1.0) {
            return Err(Error::config(format!(
                "flip_fraction must be in (0, 1], got {}",
                self.flip_fraction
            )));
        }
        if self.pairs.is_empty() {
            return Err(Error::config("attack needs at least one flip pair"));
        }
        for pair in &self.pairs {
            if pair.source == 0 || pair.target > classes {
                return Err(Error::config(format!(
                    "flip {}->{} references a class outside 1..={classes}",
                    pair.source, pair.target
                )));
            }
            if pair.source >= pair.target {
                return Err(Error::config(format!(
                    "flip {}->{} must have source < target",
                    pair.source, pair.target
                )));
            }
            if let Some((first, last)) = pair.rounds {
                if first > last {
                    return Err(Error::config(format!("empty round range {first}..={last}")));
                }
            }
        }
        match self.mode {
            AttackMode::Static if self.pairs.len() != 1 => {
                Err(Error::config("a static attack has exactly one flip pair"))
            }
            AttackMode::Adaptive => {
                let mut ranges = Vec::with_capacity(self.pairs.len());
                for pair in &self.pairs {
                    ranges.push(pair.rounds.ok_or_else(|| {
                        Error::config("every adaptive flip pair needs a round range")
                    })?);
                }
                ranges.sort_unstable();
                if ranges.windows(2).any(|w| w[1].0 <= w[0].1) {
                    return Err(Error::config("adaptive round ranges overlap"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// The flip in effect at `round`, if any.
    pub fn active_pair(&self, round: usize) -> Option<&FlipPair> {
        match self.mode {
            AttackMode::None => None,
            _ => self.pairs.iter().find(|p| p.active_at(round)),
        }
    }
}

/// Relabel source-class samples as the target class for the pair active at
/// `round`. With `flip_fraction < 1` the first `round(fraction * count)`
/// source samples in shard order are flipped. Features are never touched.
pub fn apply_tlfa(shard: &Dataset, spec: &AttackSpec, round: usize) -> Result<Dataset> {
    spec.validate(shard.classes())?;
    let Some(pair) = spec.active_pair(round) else {
        return Ok(shard.clone());
    };
    let sources = shard.class_count(pair.source);
    let budget = if spec.flip_fraction >= 1.0 {
        sources
    } else {
        (spec.flip_fraction * sources as f64).round() as usize
    };
    let mut out = shard.clone();
    let mut flipped = 0;
    for label in out.labels.iter_mut() {
        if flipped == budget {
            break;
        }
        if *label == pair.source {
            *label = pair.target;
            flipped += 1;
        }
    }
    Ok(out)
}
