//! Executes one configuration over a set of seeds and writes its run
//! directory.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use defend_core::metrics::MetricSnapshot;
use defend_core::sim::{self, ExperimentResult, RoundLog, SimConfig};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config;
use crate::stats::{self, Spread};

/// Version of the rounds.csv column layout. Bumped whenever a column is
/// added, removed or reordered.
pub const ROUNDS_SCHEMA: u32 = 1;

pub const ROUNDS_HEADER: &str =
    "seed,round,aggregator,accepted,gacc,srec,asr,goal_source,goal_target,\
informative,cohort,malicious_in_cohort,skipped,outliers,blacklist";

pub const INCOMPLETE_MARKER: &str = ".incomplete";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub gacc: f64,
    pub srec: Option<f64>,
    pub asr: Option<f64>,
}

impl From<&MetricSnapshot> for FinalMetrics {
    fn from(m: &MetricSnapshot) -> Self {
        Self {
            gacc: m.gacc,
            srec: m.srec,
            asr: m.asr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub rounds_completed: usize,
    pub halted: Option<String>,
    pub malicious: Vec<usize>,
    pub blacklist: Vec<usize>,
    pub blacklisted_malicious: usize,
    pub blacklisted_benign: usize,
    pub final_metrics: FinalMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub gacc: Option<Spread>,
    pub srec: Option<Spread>,
    pub asr: Option<Spread>,
}

/// Contents of summary.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub version: String,
    pub rounds_schema: u32,
    pub config_hash: String,
    pub task_hash: String,
    pub aggregator: String,
    pub malicious_rate: f64,
    pub seeds: Vec<u64>,
    pub config: SimConfig,
    pub runs: Vec<SeedSummary>,
    pub aggregates: Aggregates,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Also write the raw detection features of every DEFEND round.
    pub export_features: bool,
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// One rounds.csv data line, without the trailing newline. Reals use the
/// shortest representation that parses back to the same `f64`.
pub fn rounds_row(seed: u64, aggregator: &str, log: &RoundLog) -> String {
    let informative = log.report.as_ref().map(|r| r.informative);
    [
        seed.to_string(),
        log.round.to_string(),
        aggregator.to_string(),
        log.accepted.to_string(),
        log.test.gacc.to_string(),
        opt(log.test.srec),
        opt(log.test.asr),
        opt(log.goal.map(|g| g.0)),
        opt(log.goal.map(|g| g.1)),
        opt(informative),
        join_ids(&log.cohort),
        join_ids(&log.malicious_in_cohort),
        join_ids(&log.skipped),
        join_ids(&log.outliers),
        join_ids(&log.blacklist),
    ]
    .join(",")
}

pub fn write_rounds_csv<W: Write>(
    mut out: W,
    runs: &[(u64, ExperimentResult)],
    aggregator: &str,
) -> io::Result<()> {
    writeln!(out, "{ROUNDS_HEADER}")?;
    for (seed, result) in runs {
        for log in &result.logs {
            writeln!(out, "{}", rounds_row(*seed, aggregator, log))?;
        }
    }
    Ok(())
}

pub fn seed_summary(seed: u64, result: &ExperimentResult) -> SeedSummary {
    let blacklist = result
        .logs
        .last()
        .map(|l| l.blacklist.clone())
        .unwrap_or_default();
    let blacklisted_malicious = blacklist
        .iter()
        .filter(|c| result.malicious.binary_search(c).is_ok())
        .count();
    SeedSummary {
        seed,
        rounds_completed: result.logs.len(),
        halted: result.halted.clone(),
        malicious: result.malicious.clone(),
        blacklisted_benign: blacklist.len() - blacklisted_malicious,
        blacklisted_malicious,
        blacklist,
        final_metrics: (&result.final_test).into(),
    }
}

pub fn aggregates(runs: &[SeedSummary]) -> Aggregates {
    let collect = |f: &dyn Fn(&FinalMetrics) -> Option<f64>| -> Vec<f64> {
        runs.iter().filter_map(|r| f(&r.final_metrics)).collect()
    };
    Aggregates {
        gacc: stats::spread(&collect(&|m| Some(m.gacc))),
        srec: stats::spread(&collect(&|m| m.srec)),
        asr: stats::spread(&collect(&|m| m.asr)),
    }
}

/// Runs every seed (in parallel) with `config` and returns the results in
/// seed order.
pub fn simulate(config: &SimConfig, seeds: &[u64]) -> anyhow::Result<Vec<(u64, ExperimentResult)>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let result = sim::run_experiment(SimConfig {
                seed,
                ..config.clone()
            })
            .with_context(|| format!("seed {seed}"))?;
            info!(
                "{} seed {seed}: gacc {:.4} srec {} asr {}",
                config.aggregator.name(),
                result.final_test.gacc,
                opt(result.final_test.srec),
                opt(result.final_test.asr)
            );
            Ok((seed, result))
        })
        .collect()
}

fn create(path: PathBuf) -> anyhow::Result<BufWriter<File>> {
    let file = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_features(dir: &Path, seed: u64, result: &ExperimentResult) -> anyhow::Result<()> {
    for log in &result.logs {
        let Some(report) = &log.report else { continue };
        let mut out = create(dir.join(format!("features_seed{seed}_round{}.csv", log.round)))?;
        let mut header = String::from("client,malicious,outlier");
        for j in 1..=report.features.width() {
            write!(header, ",u{j}")?;
        }
        writeln!(out, "{header}")?;
        for (client, row) in report.features.clients.iter().zip(&report.features.rows) {
            let values: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(
                out,
                "{client},{},{},{}",
                result.malicious.binary_search(client).is_ok(),
                report.outliers.contains(client),
                values.join(",")
            )?;
        }
        out.flush()?;
    }
    Ok(())
}

/// Runs `config` for every seed and writes the run directory `dir`:
/// rounds.csv, summary.json, timings.csv, one confusion matrix per seed and
/// optionally the detection features. A marker file stays behind if the run
/// fails part way.
pub fn execute(
    config: &SimConfig,
    seeds: &[u64],
    dir: &Path,
    options: &RunOptions,
) -> anyhow::Result<RunSummary> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let marker = dir.join(INCOMPLETE_MARKER);
    fs::write(&marker, "run in progress or failed\n")?;

    let results = simulate(config, seeds)?;
    let aggregator = config.aggregator.name();

    let mut rounds = create(dir.join("rounds.csv"))?;
    write_rounds_csv(&mut rounds, &results, aggregator)?;
    rounds.flush()?;

    let mut timings = create(dir.join("timings.csv"))?;
    writeln!(timings, "seed,round,detection_seconds")?;
    for (seed, result) in &results {
        for log in &result.logs {
            writeln!(
                timings,
                "{seed},{},{}",
                log.round,
                log.detection_time.as_secs_f64()
            )?;
        }
        let mut confusion = create(dir.join(format!("confusion_final_seed{seed}.csv")))?;
        result.final_test.confusion.write_csv(&mut confusion)?;
        confusion.flush()?;
        if options.export_features {
            write_features(dir, *seed, result)?;
        }
    }
    timings.flush()?;

    let runs: Vec<SeedSummary> = results.iter().map(|(s, r)| seed_summary(*s, r)).collect();
    let summary = RunSummary {
        version: env!("CARGO_PKG_VERSION").to_string(),
        rounds_schema: ROUNDS_SCHEMA,
        config_hash: config::config_hash(config, seeds),
        task_hash: config::task_hash(config, seeds),
        aggregator: aggregator.to_string(),
        malicious_rate: config.malicious_rate,
        seeds: seeds.to_vec(),
        config: config.clone(),
        aggregates: aggregates(&runs),
        runs,
    };
    let mut out = create(dir.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut out, &summary)?;
    writeln!(out)?;
    out.flush()?;

    fs::remove_file(&marker)?;
    Ok(summary)
}

pub fn read_summary(dir: &Path) -> anyhow::Result<RunSummary> {
    if dir.join(INCOMPLETE_MARKER).exists() {
        anyhow::bail!("{} holds an incomplete run", dir.display());
    }
    let path = dir.join("summary.json");
    let text =
        fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("malformed {}", path.display()))
}
