//! Round orchestration: cohort selection, local training fan-out, server-side
//! aggregation (any strategy, DEFEND included) and per-round logging.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use log::{debug, warn};
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{self, AggregatorKind, FoolsGoldHistory};
use crate::data::{self, AttackSpec, Dataset, TaskSpec, TaskSplits};
use crate::defend::{Defend, DefendParams, DetectionReport};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricSnapshot};
use crate::nn::{self, ModelParams, TrainConfig};
use crate::rng::{self, Purpose};

/// How class centers are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CenterLayout {
    /// I.i.d. `N(0, center_scale^2)` coordinates.
    Random,
    /// Orthogonal random directions, every pair `center_scale` apart.
    Equidistant,
}

/// Synthetic task shape. Centers are drawn from the run's master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub classes: usize,
    pub dim: usize,
    pub layout: CenterLayout,
    pub center_scale: f64,
    /// Two classes (1-based) whose centers are pulled to `close_distance`.
    pub close_pair: Option<[usize; 2]>,
    pub close_distance: f64,
    pub spread: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            dim: 32,
            layout: CenterLayout::Equidistant,
            center_scale: 6.0,
            close_pair: None,
            close_distance: 4.0,
            spread: 1.0,
            train_per_class: 600,
            test_per_class: 400,
        }
    }
}

impl TaskConfig {
    /// The fixed benchmark task: equidistant centers with classes 1 and 4
    /// pulled closer together.
    pub fn benchmark() -> Self {
        Self {
            close_pair: Some([1, 4]),
            train_per_class: 4000,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Total clients K.
    pub clients: usize,
    /// Cohort size M per round.
    pub per_round: usize,
    /// Global rounds T.
    pub rounds: usize,
    /// Fraction P/K of malicious clients, at most one half.
    pub malicious_rate: f64,
    pub dirichlet_alpha: f64,
    pub hidden: Vec<usize>,
    pub aggregator: AggregatorKind,
    pub attack: AttackSpec,
    /// Class pair reported as SRec/ASR on the test set. Defaults to the first
    /// attack pair, else `(1, 2)`.
    pub eval_pair: Option<(usize, usize)>,
    pub task: TaskConfig,
    pub train: TrainConfig,
    pub defend: DefendParams,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            clients: 100,
            per_round: 20,
            rounds: 60,
            malicious_rate: 0.3,
            dirichlet_alpha: 1.0,
            hidden: vec![64],
            aggregator: AggregatorKind::Defend,
            attack: AttackSpec::flip(1, 4),
            eval_pair: None,
            task: TaskConfig::default(),
            train: TrainConfig::default(),
            defend: DefendParams::default(),
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn malicious_count(&self) -> usize {
        (self.malicious_rate * self.clients as f64).round() as usize
    }

    pub fn eval_pair(&self) -> (usize, usize) {
        self.eval_pair
            .or_else(|| self.attack.pairs.first().map(|p| (p.source, p.target)))
            .unwrap_or((1, 2))
    }

    /// Expected malicious members of a cohort, the default Byzantine budget
    /// for Krum and trimmed mean.
    pub fn expected_malicious_per_round(&self) -> usize {
        self.per_round * self.malicious_count() / self.clients.max(1)
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.task.dim];
        sizes.extend(&self.hidden);
        sizes.push(self.task.classes);
        sizes
    }

    /// Aggregator with unset budgets filled in and clamped to the cohort size.
    pub fn resolved_aggregator(&self) -> AggregatorKind {
        let m = self.per_round;
        let budget = self.expected_malicious_per_round();
        match self.aggregator {
            AggregatorKind::Krum { assumed_byzantine } => AggregatorKind::Krum {
                assumed_byzantine: Some(
                    assumed_byzantine.unwrap_or_else(|| budget.min(m.saturating_sub(3))),
                ),
            },
            AggregatorKind::TrimmedMean { trim_count } => AggregatorKind::TrimmedMean {
                trim_count: Some(
                    trim_count.unwrap_or_else(|| budget.min((m / 2).saturating_sub(1))),
                ),
            },
            ref other => other.clone(),
        }
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        let build = match self.task.layout {
            CenterLayout::Random => TaskSpec::random_centers,
            CenterLayout::Equidistant => TaskSpec::equidistant_centers,
        };
        let spec = build(
            self.task.classes,
            self.task.dim,
            self.task.center_scale,
            self.task.spread,
            self.task.train_per_class,
            self.task.test_per_class,
            rng::derive_seed(self.seed, Purpose::Task, 0, 0),
        )?;
        match self.task.close_pair {
            Some([a, b]) => spec.with_close_pair(a, b, self.task.close_distance),
            None => Ok(spec),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 || self.rounds == 0 {
            return Err(Error::config("clients and rounds must be at least 1"));
        }
        if self.per_round == 0 || self.per_round > self.clients {
            return Err(Error::config(format!(
                "per_round must lie in 1..={} (clients), got {}",
                self.clients, self.per_round
            )));
        }
        if !(0.0..=1.0).contains(&self.malicious_rate) || 2 * self.malicious_count() > self.clients
        {
            return Err(Error::config(format!(
                "malicious_rate {} gives more than half of {} clients",
                self.malicious_rate, self.clients
            )));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(Error::config("dirichlet_alpha must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden layer widths must be positive"));
        }
        self.task_spec()?;
        self.attack.validate(self.task.classes)?;
        let (f, g) = self.eval_pair();
        if f == 0 || g == 0 || f > self.task.classes || g > self.task.classes || f == g {
            return Err(Error::config(format!(
                "eval_pair ({f}, {g}) invalid for {} classes",
                self.task.classes
            )));
        }
        self.train.validate()?;
        self.defend.validate()?;
        self.resolved_aggregator().validate(self.per_round)
    }
}

/// One client: its private shard and, for adversaries, the label-flipping
/// schedule it applies to that shard.
#[derive(Debug, Clone)]
pub struct ClientRecord {
    pub id: usize,
    shard: Dataset,
    attack: AttackSpec,
}

impl ClientRecord {
    pub fn new(id: usize, shard: Dataset, attack: AttackSpec) -> Self {
        Self { id, shard, attack }
    }

    pub fn is_malicious(&self) -> bool {
        self.attack.mode != data::AttackMode::None
    }

    pub fn shard(&self) -> &Dataset {
        &self.shard
    }

    /// The client's upload for `round`: its own (possibly relabeled) shard
    /// trained from `global`. `None` when the shard is empty.
    pub fn local_update(
        &self,
        global: &ModelParams,
        round: usize,
        cfg: &TrainConfig,
    ) -> Result<Option<ModelParams>> {
        let shard = data::apply_tlfa(&self.shard, &self.attack, round)?;
        match nn::train_local(global, &shard, cfg) {
            Ok(model) => Ok(Some(model)),
            Err(Error::EmptyShard) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

/// Uniform draw without replacement of `min(m, |eligible|)` clients, returned
/// in ascending id order.
pub fn select_clients<R: Rng>(eligible: &[usize], m: usize, rng: &mut R) -> Result<Vec<usize>> {
    if eligible.is_empty() {
        return Err(Error::NoSelectableClients);
    }
    let amount = m.min(eligible.len());
    let mut cohort: Vec<usize> = index::sample(rng, eligible.len(), amount)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    cohort.sort_unstable();
    Ok(cohort)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub cohort: Vec<usize>,
    /// Ground truth, never visible to the server logic.
    pub malicious_in_cohort: Vec<usize>,
    /// Cohort members whose shard was empty.
    pub skipped: Vec<usize>,
    pub outliers: Vec<usize>,
    pub goal: Option<(usize, usize)>,
    /// Whether this round's aggregate became the deployed model.
    pub accepted: bool,
    pub test: MetricSnapshot,
    pub ratings: Vec<(usize, f64)>,
    pub blacklist: Vec<usize>,
    pub detection_time: Duration,
    #[serde(skip)]
    pub report: Option<DetectionReport>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub final_model: ModelParams,
    pub initial_model: ModelParams,
    pub logs: Vec<RoundLog>,
    pub malicious: Vec<usize>,
    pub final_test: MetricSnapshot,
    /// Set when the run stopped before `rounds` because no client was left.
    pub halted: Option<String>,
}

enum Server {
    Plain(AggregatorKind),
    FoolsGold(FoolsGoldHistory),
    Defend(Box<Defend>),
}

pub struct Simulation {
    config: SimConfig,
    splits: TaskSplits,
    clients: Vec<ClientRecord>,
    malicious: Vec<usize>,
    initial: ModelParams,
    global: ModelParams,
    server: Server,
    next_round: usize,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let splits = data::generate_task(&config.task_spec()?)?;
        let shards = data::dirichlet_partition(
            &splits.train,
            config.clients,
            config.dirichlet_alpha,
            &mut rng::stream(config.seed, Purpose::Partition, 0, 0),
        )?;
        let mut adv_rng = rng::stream(config.seed, Purpose::Adversaries, 0, 0);
        let mut malicious: Vec<usize> =
            index::sample(&mut adv_rng, config.clients, config.malicious_count())
                .into_iter()
                .collect();
        malicious.sort_unstable();
        let malicious_set: BTreeSet<usize> = malicious.iter().copied().collect();
        let clients = shards
            .into_iter()
            .enumerate()
            .map(|(id, shard)| {
                let attack = if malicious_set.contains(&id) {
                    config.attack.clone()
                } else {
                    AttackSpec::none()
                };
                ClientRecord::new(id, shard, attack)
            })
            .collect();
        let initial = ModelParams::init(
            &config.layer_sizes(),
            &mut rng::stream(config.seed, Purpose::ModelInit, 0, 0),
        )?;
        let server = match config.resolved_aggregator() {
            AggregatorKind::FoolsGold => Server::FoolsGold(FoolsGoldHistory::new()),
            AggregatorKind::Defend => Server::Defend(Box::new(Defend::new(
                0..config.clients,
                config.defend.clone(),
            )?)),
            other => Server::Plain(other),
        };
        Ok(Self {
            config,
            splits,
            clients,
            malicious,
            global: initial.clone(),
            initial,
            server,
            next_round: 1,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn splits(&self) -> &TaskSplits {
        &self.splits
    }

    pub fn clients(&self) -> &[ClientRecord] {
        &self.clients
    }

    pub fn malicious(&self) -> &[usize] {
        &self.malicious
    }

    pub fn global(&self) -> &ModelParams {
        &self.global
    }

    pub fn defend(&self) -> Option<&Defend> {
        match &self.server {
            Server::Defend(d) => Some(d),
            _ => None,
        }
    }

    fn is_blacklisted(&self, client: usize) -> bool {
        self.defend()
            .is_some_and(|d| d.blacklist().contains(client))
    }

    /// Training configuration handed to `client` for `round`; the seed is the
    /// only per-client part.
    pub fn train_config(&self, round: usize, client: usize) -> TrainConfig {
        TrainConfig {
            seed: rng::derive_seed(
                self.config.seed,
                Purpose::LocalTraining,
                round as u64,
                client as u64,
            ),
            ..self.config.train.clone()
        }
    }

    /// Local updates of `cohort`, trained in parallel and returned in cohort
    /// order. Clients with empty shards are listed separately.
    pub fn collect_updates(
        &self,
        round: usize,
        cohort: &[usize],
    ) -> Result<(Vec<(usize, ModelParams)>, Vec<usize>)> {
        let results: Vec<Result<Option<ModelParams>>> = cohort
            .par_iter()
            .map(|&id| {
                self.clients[id].local_update(&self.global, round, &self.train_config(round, id))
            })
            .collect();
        let mut updates = Vec::with_capacity(cohort.len());
        let mut skipped = Vec::new();
        for (&id, result) in cohort.iter().zip(results) {
            match result? {
                Some(model) => updates.push((id, model)),
                None => skipped.push(id),
            }
        }
        Ok((updates, skipped))
    }

    /// Runs the next round.
    pub fn run_round(&mut self) -> Result<RoundLog> {
        let round = self.next_round;
        let eligible: Vec<usize> = (0..self.config.clients)
            .filter(|&c| !self.is_blacklisted(c))
            .collect();
        let cohort = select_clients(
            &eligible,
            self.config.per_round,
            &mut rng::stream(self.config.seed, Purpose::Selection, round as u64, 0),
        )?;
        let (updates, skipped) = self.collect_updates(round, &cohort)?;
        let models: Vec<ModelParams> = updates.iter().map(|(_, m)| m.clone()).collect();

        let mut outliers = Vec::new();
        let mut goal = None;
        let mut report = None;
        let started = Instant::now();
        let aggregate: Result<ModelParams> = match &mut self.server {
            Server::Plain(kind) => aggregate_plain(kind, &models),
            Server::FoolsGold(history) => {
                let deltas = updates
                    .iter()
                    .map(|(c, m)| nn::output_layer_delta(m, &self.global, *c, round))
                    .collect::<Result<Vec<_>>>()?;
                let weights = history.update(&deltas);
                aggregation::weighted_average(&models, &weights)
            }
            Server::Defend(defend) if !updates.is_empty() => {
                let outcome =
                    defend.round(round, &self.global, &updates, &self.splits.server_val)?;
                outliers = outcome.report.outliers.iter().copied().collect();
                goal = Some(outcome.report.goal.pair());
                let accepted = outcome.report.accepted;
                report = Some(outcome.report);
                if accepted {
                    Ok(outcome.global)
                } else {
                    Err(Error::EmptyCohort)
                }
            }
            Server::Defend(_) => Err(Error::EmptyCohort),
        };
        let detection_time = started.elapsed();

        let accepted = match aggregate {
            Ok(model) => {
                self.global = model;
                true
            }
            Err(e) if e.is_round_skip() => {
                debug!("round {round}: keeping previous global model ({e})");
                false
            }
            Err(e) => return Err(e),
        };

        let test = metrics::evaluate(&self.global, &self.splits.test, self.config.eval_pair())?;
        let malicious_in_cohort = cohort
            .iter()
            .copied()
            .filter(|c| self.malicious.binary_search(c).is_ok())
            .collect();
        let (ratings, blacklist) = match self.defend() {
            Some(d) => (d.ratings().iter().collect(), d.blacklist().iter().collect()),
            None => (Vec::new(), Vec::new()),
        };
        self.next_round += 1;
        Ok(RoundLog {
            round,
            cohort,
            malicious_in_cohort,
            skipped,
            outliers,
            goal,
            accepted,
            test,
            ratings,
            blacklist,
            detection_time,
            report,
        })
    }

    /// Runs all configured rounds. A run where every client ends up
    /// blacklisted stops early with `halted` set.
    pub fn run(mut self) -> Result<ExperimentResult> {
        let mut logs = Vec::with_capacity(self.config.rounds);
        let mut halted = None;
        for _ in 0..self.config.rounds {
            match self.run_round() {
                Ok(log) => logs.push(log),
                Err(Error::NoSelectableClients) => {
                    warn!(
                        "every client is blacklisted; stopping after round {}",
                        self.next_round - 1
                    );
                    halted = Some(format!(
                        "no selectable clients at round {}",
                        self.next_round
                    ));
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let final_test =
            metrics::evaluate(&self.global, &self.splits.test, self.config.eval_pair())?;
        Ok(ExperimentResult {
            final_model: self.global,
            initial_model: self.initial,
            logs,
            malicious: self.malicious,
            final_test,
            halted,
        })
    }
}

fn aggregate_plain(kind: &AggregatorKind, models: &[ModelParams]) -> Result<ModelParams> {
    if models.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let m = models.len();
    match *kind {
        AggregatorKind::Krum { assumed_byzantine } => {
            let f = assumed_byzantine.unwrap_or(0).min(m.saturating_sub(3));
            if m < 3 {
                warn!("krum needs 3 models, got {m}; falling back to fedavg");
                return aggregation::fedavg(models);
            }
            aggregation::krum(models, f)
        }
        AggregatorKind::TrimmedMean { trim_count } => {
            aggregation::trimmed_mean(models, trim_count.unwrap_or(0).min((m - 1) / 2))
        }
        AggregatorKind::Median => aggregation::coordinate_median(models),
        _ => aggregation::fedavg(models),
    }
}

/// Builds the simulation and runs every round.
pub fn run_experiment(config: SimConfig) -> Result<ExperimentResult> {
    Simulation::new(config)?.run()
}
