//! Confusion matrices and the GAcc / SRec / ASR metrics.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::ModelParams;

/// `counts[true - 1][predicted - 1]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth - 1][predicted - 1] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_total(&self, class: usize) -> u64 {
        self.counts[class - 1].iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    /// Row-major CSV without header, one line per true class.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        for row in &self.counts {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Metrics of one model on one labeled set. `srec` and `asr` are `None` when
/// the set holds no sample of the source class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub confusion: ConfusionMatrix,
    pub pair: (usize, usize),
    pub gacc: f64,
    pub srec: Option<f64>,
    pub asr: Option<f64>,
}

impl MetricSnapshot {
    pub fn from_confusion(confusion: ConfusionMatrix, pair: (usize, usize)) -> Result<Self> {
        let total = confusion.total();
        if total == 0 {
            return Err(Error::EmptyDataset);
        }
        let (source, target) = pair;
        let classes = confusion.classes();
        if source == 0 || target == 0 || source > classes || target > classes {
            return Err(Error::config(format!(
                "pair {pair:?} outside 1..={classes}"
            )));
        }
        let gacc = confusion.trace() as f64 / total as f64;
        let source_total = confusion.row_total(source);
        let (srec, asr) = if source_total == 0 {
            (None, None)
        } else {
            let row = &confusion.counts[source - 1];
            (
                Some(row[source - 1] as f64 / source_total as f64),
                Some(row[target - 1] as f64 / source_total as f64),
            )
        };
        Ok(Self {
            confusion,
            pair,
            gacc,
            srec,
            asr,
        })
    }
}

pub fn confusion_matrix(model: &ModelParams, data: &Dataset) -> Result<ConfusionMatrix> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.classes() != model.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: model.num_classes(),
            actual: data.classes(),
        });
    }
    let predictions = model.predict(data.features())?;
    let mut confusion = ConfusionMatrix::new(data.classes());
    for (&truth, &pred) in data.labels().iter().zip(&predictions) {
        confusion.record(truth, pred);
    }
    Ok(confusion)
}

/// Evaluates `model` on `data` for the source/target `pair` (1-based).
pub fn evaluate(
    model: &ModelParams,
    data: &Dataset,
    pair: (usize, usize),
) -> Result<MetricSnapshot> {
    MetricSnapshot::from_confusion(confusion_matrix(model, data)?, pair)
}
