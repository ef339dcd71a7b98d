use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use defend_cli::{compare, config, run};
use defend_core::aggregation::AggregatorKind;
use defend_core::sim::SimConfig;

#[derive(Parser)]
#[command(
    name = "defend",
    version,
    about = "Federated-learning poisoning simulator with the DEFEND defense"
)]
struct Cli {
    /// -v warnings, -vv progress, -vvv per-round detail.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a config over one or more seeds and write a run directory.
    Run {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// First master seed; defaults to the config's `seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of consecutive seeds starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Malicious rates to sweep, comma separated.
        #[arg(long, value_delimiter = ',')]
        malicious_rate: Vec<f64>,
        /// Aggregators to sweep: fedavg, krum, tmean, median, foolsgold, defend.
        #[arg(long, value_delimiter = ',')]
        aggregator: Vec<String>,
        /// Write the per-round detection features of DEFEND runs.
        #[arg(long)]
        export_features: bool,
    },
    /// Tabulate finished run directories side by side.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn parse_aggregator(name: &str) -> anyhow::Result<AggregatorKind> {
    AggregatorKind::from_name(name).with_context(|| format!("unknown aggregator {name:?}"))
}

#[allow(clippy::too_many_arguments)]
fn run_command(
    config_path: PathBuf,
    out: PathBuf,
    seed: Option<u64>,
    seeds: u64,
    rates: Vec<f64>,
    aggregators: Vec<String>,
    export_features: bool,
) -> anyhow::Result<()> {
    let base = config::load(&config_path)?;
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let first = seed.unwrap_or(base.seed);
    let seed_list: Vec<u64> = (first..first + seeds).collect();
    let aggregators = if aggregators.is_empty() {
        vec![base.aggregator.clone()]
    } else {
        aggregators
            .iter()
            .map(|a| parse_aggregator(a))
            .collect::<anyhow::Result<_>>()?
    };
    let rates = if rates.is_empty() {
        vec![base.malicious_rate]
    } else {
        rates
    };

    let mut plan = Vec::new();
    for aggregator in &aggregators {
        for &rate in &rates {
            let cfg = SimConfig {
                aggregator: aggregator.clone(),
                malicious_rate: rate,
                ..base.clone()
            };
            cfg.validate()
                .with_context(|| format!("{} at malicious rate {rate}", aggregator.name()))?;
            plan.push(cfg);
        }
    }
    let sweep = plan.len() > 1;
    let options = run::RunOptions { export_features };
    for cfg in &plan {
        let dir = if sweep {
            out.join(format!("{}_p{}", cfg.aggregator.name(), cfg.malicious_rate))
        } else {
            out.clone()
        };
        let summary = run::execute(cfg, &seed_list, &dir, &options)?;
        let median = |s: Option<defend_cli::stats::Spread>| {
            s.map_or("-".into(), |s| format!("{:.4}", s.median))
        };
        println!(
            "{}: {} p={} seeds={} gacc={} srec={} asr={}",
            dir.display(),
            summary.aggregator,
            summary.malicious_rate,
            seed_list.len(),
            median(summary.aggregates.gacc),
            median(summary.aggregates.srec),
            median(summary.aggregates.asr)
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Error,
        1 => log::LevelFilter::Warn,
        2 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();

    let result = match cli.command {
        Command::Run {
            config,
            out,
            seed,
            seeds,
            malicious_rate,
            aggregator,
            export_features,
        } => run_command(
            config,
            out,
            seed,
            seeds,
            malicious_rate,
            aggregator,
            export_features,
        ),
        Command::Compare { runs, out } => compare::compare(&runs).and_then(|rows| {
            compare::write_table(std::io::stdout().lock(), &rows)?;
            if let Some(path) = out {
                let file = std::fs::File::create(&path)
                    .with_context(|| format!("cannot create {}", path.display()))?;
                compare::write_csv(std::io::BufWriter::new(file), &rows)?;
            }
            Ok(())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
