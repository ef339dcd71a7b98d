//! Side-by-side table of finished runs.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::bail;
use serde::Serialize;

use crate::run::{self, Aggregates, RunSummary};
use crate::stats::Spread;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Rank {
    Best,
    Second,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub run: String,
    pub aggregator: String,
    pub malicious_rate: f64,
    pub seeds: usize,
    pub gacc: Option<f64>,
    pub srec: Option<f64>,
    pub asr: Option<f64>,
    pub gacc_rank: Option<Rank>,
    pub srec_rank: Option<Rank>,
    pub asr_rank: Option<Rank>,
}

/// Best and second-best flags per row. Equal values share a flag; missing
/// values get none.
fn ranks(values: &[Option<f64>], higher_is_better: bool) -> Vec<Option<Rank>> {
    let mut distinct: Vec<f64> = values.iter().flatten().copied().collect();
    distinct.sort_by(|a, b| {
        if higher_is_better {
            b.total_cmp(a)
        } else {
            a.total_cmp(b)
        }
    });
    distinct.dedup();
    values
        .iter()
        .map(|v| {
            let v = (*v)?;
            match distinct.iter().position(|&d| d == v) {
                Some(0) => Some(Rank::Best),
                Some(1) => Some(Rank::Second),
                _ => None,
            }
        })
        .collect()
}

/// Builds the table from the summaries of `dirs`. Needs at least two runs,
/// all on the same task.
pub fn compare(dirs: &[PathBuf]) -> anyhow::Result<Vec<Row>> {
    if dirs.len() < 2 {
        bail!(
            "compare needs at least two run directories, got {}",
            dirs.len()
        );
    }
    let summaries: Vec<(String, RunSummary)> = dirs
        .iter()
        .map(|d| Ok((label(d), run::read_summary(d)?)))
        .collect::<anyhow::Result<_>>()?;
    let task = &summaries[0].1.task_hash;
    if let Some((name, _)) = summaries.iter().find(|(_, s)| &s.task_hash != task) {
        bail!(
            "run {name} was made on a different task than {}",
            summaries[0].0
        );
    }
    let medians = |f: fn(&Aggregates) -> Option<Spread>| -> Vec<Option<f64>> {
        summaries
            .iter()
            .map(|(_, s)| f(&s.aggregates).map(|x| x.median))
            .collect()
    };
    let (gacc, srec, asr) = (medians(|a| a.gacc), medians(|a| a.srec), medians(|a| a.asr));
    let (gr, sr, ar) = (ranks(&gacc, true), ranks(&srec, true), ranks(&asr, false));
    Ok(summaries
        .into_iter()
        .enumerate()
        .map(|(i, (run, s))| Row {
            run,
            aggregator: s.aggregator,
            malicious_rate: s.malicious_rate,
            seeds: s.seeds.len(),
            gacc: gacc[i],
            srec: srec[i],
            asr: asr[i],
            gacc_rank: gr[i],
            srec_rank: sr[i],
            asr_rank: ar[i],
        })
        .collect())
}

fn label(dir: &Path) -> String {
    dir.file_name().map_or_else(
        || dir.display().to_string(),
        |n| n.to_string_lossy().into_owned(),
    )
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn rank_cell(r: Option<Rank>) -> &'static str {
    match r {
        Some(Rank::Best) => "best",
        Some(Rank::Second) => "second",
        None => "",
    }
}

pub const COMPARE_HEADER: &str =
    "run,aggregator,malicious_rate,seeds,gacc,srec,asr,gacc_rank,srec_rank,asr_rank";

pub fn write_csv<W: Write>(mut out: W, rows: &[Row]) -> io::Result<()> {
    writeln!(out, "{COMPARE_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.run,
            r.aggregator,
            r.malicious_rate,
            r.seeds,
            cell(r.gacc),
            cell(r.srec),
            cell(r.asr),
            rank_cell(r.gacc_rank),
            rank_cell(r.srec_rank),
            rank_cell(r.asr_rank)
        )?;
    }
    Ok(())
}

/// Console table. `*` marks the best value of a column, `+` the runner-up.
pub fn write_table<W: Write>(mut out: W, rows: &[Row]) -> io::Result<()> {
    let fmt = |v: Option<f64>, r: Option<Rank>| {
        let mark = match r {
            Some(Rank::Best) => "*",
            Some(Rank::Second) => "+",
            None => " ",
        };
        match v {
            Some(v) => format!("{:>7.2}{mark}", 100.0 * v),
            None => format!("{:>7}{mark}", "-"),
        }
    };
    let width = rows.iter().map(|r| r.run.len()).max().unwrap_or(3).max(3);
    writeln!(
        out,
        "{:<width$}  {:<10} {:>6}  {:>8} {:>8} {:>8}",
        "run", "aggregator", "rate", "GAcc%", "SRec%", "ASR%"
    )?;
    for r in rows {
        writeln!(
            out,
            "{:<width$}  {:<10} {:>6.2}  {} {} {}",
            r.run,
            r.aggregator,
            r.malicious_rate,
            fmt(r.gacc, r.gacc_rank),
            fmt(r.srec, r.srec_rank),
            fmt(r.asr, r.asr_rank)
        )?;
    }
    writeln!(out, "medians over seeds; * best, + second best")
}
