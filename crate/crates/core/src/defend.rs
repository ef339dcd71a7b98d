//! DEFEND server pipeline.
//!
//! Per round: output-layer deltas of every local model, per-neuron magnitudes
//! and their cohort sums, the two loudest neurons as the estimated
//! source/target pair, GMM clustering of the deltas of those two neurons,
//! FedAvg over the models outside the denser cluster, a validation gate on the
//! estimated pair that rolls back harmful rounds, and a rating update that
//! blacklists clients whose rating reaches the floor.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::aggregation;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gmm::{self, Density, GmmOptions};
use crate::metrics;
use crate::nn::{self, ModelParams, OutputDelta};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefendParams {
    pub srec_threshold: f64,
    pub asr_threshold: f64,
    pub rating: RatingParams,
    pub gmm: GmmOptions,
    /// GMM filtering of local models. Off means every model is aggregated and
    /// nobody is flagged.
    pub detection: bool,
    /// Metric-gated rollback of the aggregated model.
    pub validation: bool,
    /// Which GMM cluster counts as the denser, poisoned one.
    pub density: Density,
    /// Clusterings whose [`gmm::separation`] falls below this flag nobody.
    pub min_separation: f64,
}

impl Default for DefendParams {
    fn default() -> Self {
        Self {
            srec_threshold: 0.1,
            asr_threshold: 0.1,
            rating: RatingParams::default(),
            gmm: GmmOptions::default(),
            detection: true,
            validation: true,
            density: Density::RelativeCompactness,
            min_separation: 2.0,
        }
    }
}

impl DefendParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.srec_threshold >= 0.0 && self.asr_threshold >= 0.0) {
            return Err(Error::config("validation thresholds must be non-negative"));
        }
        if !(self.min_separation >= 0.0) {
            return Err(Error::config("min_separation must be non-negative"));
        }
        self.rating.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatingParams {
    pub r_min: f64,
    pub r_max: f64,
    /// Reward per clean round.
    pub beta: f64,
    /// Penalty per flagged round.
    pub gamma: f64,
    /// Initial rating as a fraction of the range.
    pub delta: f64,
}

impl Default for RatingParams {
    fn default() -> Self {
        Self {
            r_min: 0.0,
            r_max: 1.0,
            beta: 0.05,
            gamma: 0.20,
            delta: 0.8,
        }
    }
}

impl RatingParams {
    pub fn initial(&self) -> f64 {
        quantize(self.delta * (self.r_max - self.r_min))
    }

    pub fn validate(&self) -> Result<()> {
        let range = self.r_max - self.r_min;
        if !(range > 0.0) {
            return Err(Error::config("rating range must satisfy r_min < r_max"));
        }
        if !(self.beta > 0.0
            && self.beta <= self.r_max
            && self.gamma > 0.0
            && self.gamma <= self.r_max)
        {
            return Err(Error::config(
                "rating steps beta and gamma must lie in (0, r_max]",
            ));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::config(
                "initial rating fraction delta must lie in [0, 1]",
            ));
        }
        Ok(())
    }
}

// Ratings live on a 1e-9 grid so repeated fixed steps land exactly on the
// clamp bounds (0.8 - 4 * 0.2 is 0, not 1e-16).
fn quantize(r: f64) -> f64 {
    (r * 1e9).round() / 1e9
}

/// Per-client output-neuron delta norms and their sums over the cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeTable {
    pub clients: Vec<usize>,
    /// `per_client[i][l]` is the norm of client `clients[i]`'s row for class `l + 1`.
    pub per_client: Vec<Vec<f64>>,
    pub accumulated: Vec<f64>,
}

pub fn compute_magnitudes(deltas: &[OutputDelta]) -> Result<MagnitudeTable> {
    let first = deltas.first().ok_or(Error::EmptyCohort)?;
    let neurons = first.num_neurons();
    if let Some(bad) = deltas.iter().find(|d| d.num_neurons() != neurons) {
        return Err(Error::DimensionMismatch {
            expected: neurons,
            actual: bad.num_neurons(),
        });
    }
    let per_client: Vec<Vec<f64>> = deltas
        .iter()
        .map(|d| {
            d.rows
                .iter()
                .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect()
        })
        .collect();
    let mut accumulated = vec![0.0; neurons];
    for row in &per_client {
        for (acc, v) in accumulated.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Ok(MagnitudeTable {
        clients: deltas.iter().map(|d| d.client).collect(),
        per_client,
        accumulated,
    })
}

/// Estimated attack goal; `source < target` always holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackGoal {
    pub source: usize,
    pub target: usize,
    pub round: usize,
}

impl AttackGoal {
    pub fn pair(&self) -> (usize, usize) {
        (self.source, self.target)
    }
}

/// The two neurons with the largest accumulated magnitude, lower class first.
/// On equal magnitudes the lower class wins the slot.
pub fn identify_goal(table: &MagnitudeTable, round: usize) -> Result<AttackGoal> {
    let neurons = table.accumulated.len();
    if neurons < 2 {
        return Err(Error::config(format!(
            "goal identification needs at least 2 classes, got {neurons}"
        )));
    }
    let mut order: Vec<usize> = (0..neurons).collect();
    order.sort_by(|&a, &b| {
        table.accumulated[b]
            .total_cmp(&table.accumulated[a])
            .then(a.cmp(&b))
    });
    let (a, b) = (order[0] + 1, order[1] + 1);
    Ok(AttackGoal {
        source: a.min(b),
        target: a.max(b),
        round,
    })
}

/// Per client (ascending id), its source-neuron delta row followed by its
/// target-neuron delta row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub clients: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    pub fn width(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

pub fn extract_features(deltas: &[OutputDelta], goal: &AttackGoal) -> Result<FeatureMatrix> {
    let mut sorted: Vec<&OutputDelta> = deltas.iter().collect();
    sorted.sort_by_key(|d| d.client);
    for d in &sorted {
        if goal.source == 0 || goal.target > d.num_neurons() || goal.source >= goal.target {
            return Err(Error::config(format!(
                "goal {:?} invalid for {} classes",
                goal.pair(),
                d.num_neurons()
            )));
        }
    }
    Ok(FeatureMatrix {
        clients: sorted.iter().map(|d| d.client).collect(),
        rows: sorted
            .iter()
            .map(|d| [d.row(goal.source), d.row(goal.target)].concat())
            .collect(),
    })
}

/// Clients flagged as poisoned. `informative` is false when the clustering
/// carried no usable structure, in which case nobody is flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub outliers: BTreeSet<usize>,
    pub informative: bool,
}

/// Clustering settings for [`detect_poisoned`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectOptions {
    pub gmm: GmmOptions,
    pub density: Density,
    pub min_separation: f64,
}

impl Default for DetectOptions {
    fn default() -> Self {
        DefendParams::default().detect_options()
    }
}

impl DefendParams {
    pub fn detect_options(&self) -> DetectOptions {
        DetectOptions {
            gmm: self.gmm,
            density: self.density,
            min_separation: self.min_separation,
        }
    }
}

/// Fits a two-component GMM to the feature rows and flags the members of the
/// denser cluster.
pub fn detect_poisoned(features: &FeatureMatrix, opts: &DetectOptions) -> Result<Detection> {
    let uninformative = |why: &str| {
        warn!("clustering uninformative ({why}); no client excluded");
        Detection {
            outliers: BTreeSet::new(),
            informative: false,
        }
    };
    let rows = &features.rows;
    if rows.len() < 2 {
        return Err(Error::config(format!(
            "detection needs at least 2 clients, got {}",
            rows.len()
        )));
    }
    let model = gmm::fit(rows, &opts.gmm)?;
    if model.degenerate {
        return Ok(uninformative("all feature rows coincide"));
    }
    let labels = gmm::assign(&model, rows)?.labels;
    let Some(bad) = gmm::denser_cluster_by(opts.density, &model, rows, &labels) else {
        return Ok(uninformative("one cluster is empty"));
    };
    let separation = gmm::separation(&model, rows, &labels).unwrap_or(0.0);
    if separation < opts.min_separation {
        return Ok(uninformative(&format!(
            "separation {separation:.3} below {}",
            opts.min_separation
        )));
    }
    let outliers = features
        .clients
        .iter()
        .zip(&labels)
        .filter(|(_, &l)| l == bad)
        .map(|(&c, _)| c)
        .collect();
    Ok(Detection {
        outliers,
        informative: true,
    })
}

/// Uniform FedAvg over the models whose client is not an outlier.
pub fn filtered_aggregate(
    models: &[(usize, ModelParams)],
    outliers: &BTreeSet<usize>,
) -> Result<ModelParams> {
    let kept: Vec<&ModelParams> = models
        .iter()
        .filter(|(c, _)| !outliers.contains(c))
        .map(|(_, m)| m)
        .collect();
    if kept.is_empty() && !models.is_empty() {
        return Err(Error::AllExcluded(models.len()));
    }
    aggregation::mean_of(&kept)
}

/// Source recall and attack success rate of the last accepted model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationState {
    pub srec_old: f64,
    pub asr_old: f64,
}

impl Default for ValidationState {
    fn default() -> Self {
        Self {
            srec_old: 0.0,
            asr_old: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub accepted: bool,
    pub state: ValidationState,
    pub srec_new: Option<f64>,
    pub asr_new: Option<f64>,
    /// The server set has no sample of the source class; the round was
    /// accepted without a check.
    pub skipped: bool,
}

/// Rejects the candidate when source recall drops by more than
/// `srec_threshold` or the attack success rate rises by more than
/// `asr_threshold`. Only an accepted candidate moves the reference metrics.
pub fn validate_global(
    candidate: &ModelParams,
    goal: &AttackGoal,
    server_val: &Dataset,
    state: ValidationState,
    srec_threshold: f64,
    asr_threshold: f64,
) -> Result<Validation> {
    let snapshot = metrics::evaluate(candidate, server_val, goal.pair())?;
    let (Some(srec_new), Some(asr_new)) = (snapshot.srec, snapshot.asr) else {
        warn!(
            "server validation set has no class {} sample; accepting unchecked",
            goal.source
        );
        return Ok(Validation {
            accepted: true,
            state,
            srec_new: None,
            asr_new: None,
            skipped: true,
        });
    };
    Ok(judge(
        srec_new,
        asr_new,
        state,
        srec_threshold,
        asr_threshold,
    ))
}

fn judge(
    srec_new: f64,
    asr_new: f64,
    state: ValidationState,
    srec_threshold: f64,
    asr_threshold: f64,
) -> Validation {
    let srec_change = srec_new - state.srec_old;
    let asr_change = asr_new - state.asr_old;
    let accepted = !(srec_change < -srec_threshold || asr_change > asr_threshold);
    let state = if accepted {
        ValidationState {
            srec_old: srec_new,
            asr_old: asr_new,
        }
    } else {
        state
    };
    Validation {
        accepted,
        state,
        srec_new: Some(srec_new),
        asr_new: Some(asr_new),
        skipped: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingTable {
    pub params: RatingParams,
    ratings: BTreeMap<usize, f64>,
}

impl RatingTable {
    pub fn new(clients: impl IntoIterator<Item = usize>, params: RatingParams) -> Self {
        let initial = params.initial();
        Self {
            params,
            ratings: clients.into_iter().map(|c| (c, initial)).collect(),
        }
    }

    pub fn get(&self, client: usize) -> Option<f64> {
        self.ratings.get(&client).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.ratings.iter().map(|(&c, &r)| (c, r))
    }

    pub fn len(&self) -> usize {
        self.ratings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratings.is_empty()
    }
}

/// Permanently excluded clients.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Blacklist(BTreeSet<usize>);

impl Blacklist {
    pub fn contains(&self, client: usize) -> bool {
        self.0.contains(&client)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    fn insert(&mut self, client: usize) -> bool {
        self.0.insert(client)
    }
}

/// Flagged cohort members lose `gamma`, the rest gain `beta`, both clamped to
/// the rating range; non-participants are untouched. Returns the clients
/// newly added to the blacklist.
pub fn update_ratings(
    cohort: &[usize],
    outliers: &BTreeSet<usize>,
    ratings: &mut RatingTable,
    blacklist: &mut Blacklist,
) -> Result<Vec<usize>> {
    let p = ratings.params;
    let mut added = Vec::new();
    for &client in cohort {
        let r = ratings
            .ratings
            .get_mut(&client)
            .ok_or_else(|| Error::config(format!("client {client} has no rating entry")))?;
        if outliers.contains(&client) {
            *r = quantize((*r - p.gamma).max(p.r_min));
            if *r <= p.r_min && blacklist.insert(client) {
                added.push(client);
            }
        } else {
            *r = quantize((*r + p.beta).min(p.r_max));
        }
    }
    Ok(added)
}

/// Everything the server learned in one DEFEND round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub round: usize,
    pub magnitudes: MagnitudeTable,
    pub goal: AttackGoal,
    pub features: FeatureMatrix,
    pub outliers: BTreeSet<usize>,
    pub informative: bool,
    /// False when every cohort member was flagged and nothing was aggregated.
    pub aggregated: bool,
    pub validation: Option<Validation>,
    pub accepted: bool,
    pub newly_blacklisted: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    /// Model deployed for the next round; the previous global on rejection.
    pub global: ModelParams,
    pub report: DetectionReport,
}

/// Server-side DEFEND state across rounds.
#[derive(Debug, Clone)]
pub struct Defend {
    params: DefendParams,
    ratings: RatingTable,
    blacklist: Blacklist,
    validation: ValidationState,
    validated_pair: Option<(usize, usize)>,
}

impl Defend {
    pub fn new(clients: impl IntoIterator<Item = usize>, params: DefendParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            ratings: RatingTable::new(clients, params.rating),
            params,
            blacklist: Blacklist::default(),
            validation: ValidationState::default(),
            validated_pair: None,
        })
    }

    pub fn params(&self) -> &DefendParams {
        &self.params
    }

    pub fn ratings(&self) -> &RatingTable {
        &self.ratings
    }

    pub fn blacklist(&self) -> &Blacklist {
        &self.blacklist
    }

    pub fn validation_state(&self) -> ValidationState {
        self.validation
    }

    /// Runs one round over `locals` (client id, local model) trained from
    /// `global`.
    pub fn round(
        &mut self,
        round: usize,
        global: &ModelParams,
        locals: &[(usize, ModelParams)],
        server_val: &Dataset,
    ) -> Result<RoundOutcome> {
        let deltas = locals
            .iter()
            .map(|(c, m)| nn::output_layer_delta(m, global, *c, round))
            .collect::<Result<Vec<_>>>()?;
        let magnitudes = compute_magnitudes(&deltas)?;
        let goal = identify_goal(&magnitudes, round)?;
        let features = extract_features(&deltas, &goal)?;

        let detection = if self.params.detection && locals.len() >= 2 {
            detect_poisoned(&features, &self.params.detect_options())?
        } else {
            Detection {
                outliers: BTreeSet::new(),
                informative: false,
            }
        };

        let (candidate, aggregated) = match filtered_aggregate(locals, &detection.outliers) {
            Ok(model) => (Some(model), true),
            Err(e) if e.is_round_skip() => {
                warn!("round {round}: {e}; keeping the previous global model");
                (None, false)
            }
            Err(e) => return Err(e),
        };

        let mut validation = None;
        let accepted = match &candidate {
            None => false,
            Some(_) if !self.params.validation => true,
            Some(model) => {
                self.rebaseline(global, &goal, server_val)?;
                let v = validate_global(
                    model,
                    &goal,
                    server_val,
                    self.validation,
                    self.params.srec_threshold,
                    self.params.asr_threshold,
                )?;
                self.validation = v.state;
                validation = Some(v);
                v.accepted
            }
        };

        let cohort: Vec<usize> = locals.iter().map(|(c, _)| *c).collect();
        let newly_blacklisted = update_ratings(
            &cohort,
            &detection.outliers,
            &mut self.ratings,
            &mut self.blacklist,
        )?;

        let next = match candidate {
            Some(model) if accepted => model,
            _ => global.clone(),
        };
        Ok(RoundOutcome {
            global: next,
            report: DetectionReport {
                round,
                magnitudes,
                goal,
                features,
                outliers: detection.outliers,
                informative: detection.informative,
                aggregated,
                validation,
                accepted,
                newly_blacklisted,
            },
        })
    }

    /// Reference metrics are only comparable for the pair they were measured
    /// on. When the estimated pair changes, re-measure the deployed model on
    /// the new pair. The very first check keeps the initial `(0, 1)` state.
    fn rebaseline(
        &mut self,
        deployed: &ModelParams,
        goal: &AttackGoal,
        server_val: &Dataset,
    ) -> Result<()> {
        if let Some(pair) = self.validated_pair {
            if pair != goal.pair() {
                let snapshot = metrics::evaluate(deployed, server_val, goal.pair())?;
                if let (Some(srec), Some(asr)) = (snapshot.srec, snapshot.asr) {
                    self.validation = ValidationState {
                        srec_old: srec,
                        asr_old: asr,
                    };
                }
            }
        }
        self.validated_pair = Some(goal.pair());
        Ok(())
    }
}
