//! TOML experiment configs, diagnostics that point at the offending line, and
//! stable content hashes.

use std::fmt;
use std::path::Path;

use defend_core::sim::SimConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// A config that failed to parse or validate.
#[derive(Debug)]
pub struct ConfigError {
    pub path: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "{}:{}: {}", self.path, line, self.message),
            None => write!(f, "{}: {}", self.path, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

pub fn load(path: &Path) -> Result<SimConfig, ConfigError> {
    let source = std::fs::read_to_string(path).map_err(|e| ConfigError {
        path: path.display().to_string(),
        line: None,
        message: e.to_string(),
    })?;
    parse(&source, &path.display().to_string())
}

/// Parses and validates `source`; `origin` names it in diagnostics.
pub fn parse(source: &str, origin: &str) -> Result<SimConfig, ConfigError> {
    let config: SimConfig = toml::from_str(source).map_err(|e| ConfigError {
        path: origin.to_string(),
        line: e.span().map(|s| line_of(source, s.start)),
        message: e.message().to_string(),
    })?;
    config.validate().map_err(|e| {
        let message = e.to_string();
        ConfigError {
            path: origin.to_string(),
            line: find_key_line(source, &message),
            message,
        }
    })?;
    Ok(config)
}

fn line_of(source: &str, offset: usize) -> usize {
    source[..offset.min(source.len())].matches('\n').count() + 1
}

/// Line of the first `key = ...` assignment whose key is named in `message`.
/// Validation errors come from the parsed struct and carry no position, so
/// this is a best effort.
fn find_key_line(source: &str, message: &str) -> Option<usize> {
    let words: Vec<&str> = message
        .split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .filter(|w| {
            w.contains('_')
                || matches!(
                    *w,
                    "clients" | "rounds" | "hidden" | "beta" | "gamma" | "delta"
                )
        })
        .collect();
    for word in words {
        for (i, line) in source.lines().enumerate() {
            let key = line.split('=').next().unwrap_or("").trim();
            if line.contains('=') && key == word {
                return Some(i + 1);
            }
        }
    }
    None
}

/// Hex SHA-256 of the canonical JSON form of `value`: object keys sorted,
/// no whitespace. Key order in the source file therefore never matters.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    // serde_json's default map is ordered by key, so a round trip through
    // `Value` canonicalizes.
    let canonical = serde_json::to_value(value).expect("configs serialize to JSON");
    let bytes = serde_json::to_vec(&canonical).expect("JSON values serialize");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize)]
struct ConfigIdentity<'a> {
    config: &'a SimConfig,
    seeds: &'a [u64],
}

/// Identity of a run directory: every semantic field of the config plus the
/// seeds it was run with.
pub fn config_hash(config: &SimConfig, seeds: &[u64]) -> String {
    content_hash(&ConfigIdentity {
        config: &SimConfig {
            seed: 0,
            ..config.clone()
        },
        seeds,
    })
}

#[derive(Serialize)]
struct TaskIdentity<'a> {
    task: &'a defend_core::sim::TaskConfig,
    eval_pair: (usize, usize),
    seeds: &'a [u64],
}

/// Identity of the data and evaluation setup. Runs are comparable only when
/// this matches, whatever the aggregator or attack.
pub fn task_hash(config: &SimConfig, seeds: &[u64]) -> String {
    content_hash(&TaskIdentity {
        task: &config.task,
        eval_pair: config.eval_pair(),
        seeds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn syntax_errors_report_their_line() {
        let err = parse("clients = 30\nrounds = \"ten\"\n", "x.toml").unwrap_err();
        assert_eq!(err.line, Some(2));
        assert!(err.to_string().starts_with("x.toml:2:"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse("clients = 30\n\nclinets = 4\n", "x.toml").unwrap_err();
        assert_eq!(err.line, Some(3));
    }

    #[test]
    fn validation_errors_point_at_the_key() {
        let err = parse("clients = 10\nper_round = 20\n", "x.toml").unwrap_err();
        assert_eq!(err.line, Some(2), "{err}");
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = "clients = 30\nper_round = 10\n[train]\nlearning_rate = 0.03\nmomentum = 0.5\nlocal_epochs = 3\nbatch_size = 64\n";
        let b = "per_round = 10\nclients = 30\n[train]\nbatch_size = 64\nlocal_epochs = 3\nmomentum = 0.5\nlearning_rate = 0.03\n";
        let (a, b) = (parse(a, "a").unwrap(), parse(b, "b").unwrap());
        assert_eq!(config_hash(&a, &[0]), config_hash(&b, &[0]));
        let c = SimConfig {
            dirichlet_alpha: 0.5,
            ..a.clone()
        };
        assert_ne!(config_hash(&a, &[0]), config_hash(&c, &[0]));
        assert_ne!(config_hash(&a, &[0]), config_hash(&a, &[1]));
    }
}
