//! Minimal dense network: ReLU hidden layers, linear output layer, softmax
//! cross-entropy, backprop and momentum SGD.
//!
//! Parameters live in one flat buffer so aggregators can treat a model as a
//! plain coordinate vector. Each layer is stored as its row-major weight
//! matrix (`out x in`) followed by its bias vector.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    layer_sizes: Vec<usize>,
    params: Vec<f64>,
}

fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl ModelParams {
    /// All-zero model. `layer_sizes` lists widths from input to output, so
    /// `[32, 64, 5]` is one hidden layer of 64 units over 5 classes.
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::config(format!(
                "layer sizes must list at least an input and an output width, all positive: {layer_sizes:?}"
            )));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            params: vec![0.0; param_count(layer_sizes)],
        })
    }

    /// Uniform fan-in initialisation, `U(-1/sqrt(in), 1/sqrt(in))` for weights
    /// and biases alike.
    pub fn init<R: Rng>(layer_sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(layer_sizes)?;
        for layer in 0..model.num_layers() {
            let bound = 1.0 / (model.layer_sizes[layer] as f64).sqrt();
            let (start, end) = model.layer_range(layer);
            for p in &mut model.params[start..end] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(model)
    }

    pub fn from_parts(layer_sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut model = Self::zeros(layer_sizes)?;
        if params.len() != model.params.len() {
            return Err(Error::DimensionMismatch {
                expected: model.params.len(),
                actual: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::config("model parameters must be finite"));
        }
        model.params = params;
        Ok(model)
    }

    /// Same architecture as `self`, different coordinates.
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Self::from_parts(&self.layer_sizes, params)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Input width of the output layer; each output row has this many
    /// weights plus one bias.
    pub fn output_fan_in(&self) -> usize {
        self.layer_sizes[self.layer_sizes.len() - 2]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.params
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn same_architecture(&self, other: &ModelParams) -> bool {
        self.layer_sizes == other.layer_sizes
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn layer_range(&self, layer: usize) -> (usize, usize) {
        let start = param_count(&self.layer_sizes[..=layer]);
        let end = param_count(&self.layer_sizes[..=layer + 1]);
        (start, end)
    }

    /// Weight matrix (row-major, `out x in`) and bias of `layer`.
    pub fn layer(&self, layer: usize) -> (&[f64], &[f64]) {
        let (start, end) = self.layer_range(layer);
        let n_weights = self.layer_sizes[layer] * self.layer_sizes[layer + 1];
        self.params[start..end].split_at(n_weights)
    }

    pub fn layer_mut(&mut self, layer: usize) -> (&mut [f64], &mut [f64]) {
        let (start, end) = self.layer_range(layer);
        let n_weights = self.layer_sizes[layer] * self.layer_sizes[layer + 1];
        self.params[start..end].split_at_mut(n_weights)
    }

    /// Incoming weights of output neuron `neuron` (0-based) with its bias
    /// appended.
    pub fn output_row(&self, neuron: usize) -> Vec<f64> {
        let fan_in = self.output_fan_in();
        let (weights, bias) = self.layer(self.num_layers() - 1);
        let mut row = weights[neuron * fan_in..(neuron + 1) * fan_in].to_vec();
        row.push(bias[neuron]);
        row
    }

    fn check_inputs(&self, inputs: &[f64]) -> Result<usize> {
        let width = self.input_dim();
        if inputs.len() % width != 0 {
            return Err(Error::DimensionMismatch {
                expected: width,
                actual: inputs.len(),
            });
        }
        Ok(inputs.len() / width)
    }

    /// Activations of every layer, input first. Hidden layers are ReLU, the
    /// last entry holds the raw logits.
    fn activations(&self, inputs: &[f64], batch: usize) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.num_layers() + 1);
        acts.push(inputs.to_vec());
        for layer in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.layer_sizes[layer], self.layer_sizes[layer + 1]);
            let (weights, bias) = self.layer(layer);
            let input = &acts[layer];
            let mut out = vec![0.0; batch * fan_out];
            for b in 0..batch {
                let x = &input[b * fan_in..(b + 1) * fan_in];
                for o in 0..fan_out {
                    let w = &weights[o * fan_in..(o + 1) * fan_in];
                    let z = bias[o] + w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>();
                    out[b * fan_out + o] = z;
                }
            }
            if layer + 1 < self.num_layers() {
                out.iter_mut().for_each(|z| *z = z.max(0.0));
            }
            acts.push(out);
        }
        acts
    }

    /// Logits for a row-major `B x in` input batch.
    pub fn forward(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        let batch = self.check_inputs(inputs)?;
        Ok(self.activations(inputs, batch).pop().unwrap())
    }

    /// Argmax class (1-based) per input row; ties go to the lower class.
    pub fn predict(&self, inputs: &[f64]) -> Result<Vec<usize>> {
        let logits = self.forward(inputs)?;
        Ok(logits
            .chunks(self.num_classes())
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best + 1
            })
            .collect())
    }

    fn check_labels(&self, labels: &[usize], batch: usize) -> Result<()> {
        if labels.len() != batch {
            return Err(Error::DimensionMismatch {
                expected: batch,
                actual: labels.len(),
            });
        }
        let classes = self.num_classes();
        if let Some(bad) = labels.iter().find(|&&l| l == 0 || l > classes) {
            return Err(Error::config(format!("label {bad} outside 1..={classes}")));
        }
        Ok(())
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn loss(&self, inputs: &[f64], labels: &[usize]) -> Result<f64> {
        let batch = self.check_inputs(inputs)?;
        self.check_labels(labels, batch)?;
        let logits = self.forward(inputs)?;
        let classes = self.num_classes();
        let total: f64 = logits
            .chunks(classes)
            .zip(labels)
            .map(|(row, &label)| log_sum_exp(row) - row[label - 1])
            .sum();
        Ok(total / batch.max(1) as f64)
    }

    /// Mean softmax cross-entropy and its gradient, laid out like the
    /// parameter buffer.
    pub fn loss_and_gradient(&self, inputs: &[f64], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let batch = self.check_inputs(inputs)?;
        self.check_labels(labels, batch)?;
        if batch == 0 {
            return Ok((0.0, vec![0.0; self.params.len()]));
        }
        let acts = self.activations(inputs, batch);
        let classes = self.num_classes();
        let scale = 1.0 / batch as f64;

        let logits = acts.last().unwrap();
        let mut loss = 0.0;
        let mut delta = vec![0.0; batch * classes];
        for b in 0..batch {
            let row = &logits[b * classes..(b + 1) * classes];
            let lse = log_sum_exp(row);
            loss += lse - row[labels[b] - 1];
            for c in 0..classes {
                delta[b * classes + c] = (row[c] - lse).exp() * scale;
            }
            delta[b * classes + labels[b] - 1] -= scale;
        }

        let mut grad = vec![0.0; self.params.len()];
        for layer in (0..self.num_layers()).rev() {
            let (fan_in, fan_out) = (self.layer_sizes[layer], self.layer_sizes[layer + 1]);
            let input = &acts[layer];
            let (start, _) = self.layer_range(layer);
            let (gw, gb) =
                grad[start..start + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            for b in 0..batch {
                let x = &input[b * fan_in..(b + 1) * fan_in];
                for o in 0..fan_out {
                    let d = delta[b * fan_out + o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, xi) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
            }
            if layer == 0 {
                break;
            }
            let (weights, _) = self.layer(layer);
            let mut prev = vec![0.0; batch * fan_in];
            for b in 0..batch {
                for o in 0..fan_out {
                    let d = delta[b * fan_out + o];
                    if d == 0.0 {
                        continue;
                    }
                    let w = &weights[o * fan_in..(o + 1) * fan_in];
                    for (p, wi) in prev[b * fan_in..(b + 1) * fan_in].iter_mut().zip(w) {
                        *p += d * wi;
                    }
                }
            }
            // ReLU mask: the stored activation is zero exactly where the unit was off.
            for (p, a) in prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
        Ok((loss * scale, grad))
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.03,
            momentum: 0.5,
            local_epochs: 3,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // A zero step is allowed: it is the neutral configuration.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("local_epochs and batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Local update: `local_epochs` passes of shuffled mini-batch SGD with
/// classical momentum (`v = mu*v + g; w -= lr*v`) starting from `global`.
pub fn train_local(
    global: &ModelParams,
    shard: &Dataset,
    cfg: &TrainConfig,
) -> Result<ModelParams> {
    cfg.validate()?;
    if shard.is_empty() {
        return Err(Error::EmptyShard);
    }
    if shard.dim() != global.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: global.input_dim(),
            actual: shard.dim(),
        });
    }
    let mut model = global.clone();
    let mut velocity = vec![0.0; model.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let dim = shard.dim();
    let mut inputs = Vec::with_capacity(cfg.batch_size * dim);
    let mut labels = Vec::with_capacity(cfg.batch_size);

    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            inputs.clear();
            labels.clear();
            for &i in batch {
                inputs.extend_from_slice(shard.row(i));
                labels.push(shard.label(i));
            }
            let (_, grad) = model.loss_and_gradient(&inputs, &labels)?;
            for ((w, v), g) in model.params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v + g;
                *w -= cfg.learning_rate * *v;
            }
        }
    }
    Ok(model)
}

/// Change of every output-layer row (weights plus bias) between a client's
/// local model and the global model it started from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputDelta {
    pub client: usize,
    pub round: usize,
    pub rows: Vec<Vec<f64>>,
}

impl OutputDelta {
    pub fn num_neurons(&self) -> usize {
        self.rows.len()
    }

    /// Row of class `class` (1-based).
    pub fn row(&self, class: usize) -> &[f64] {
        &self.rows[class - 1]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.rows.concat()
    }
}

pub fn output_layer_delta(
    local: &ModelParams,
    global: &ModelParams,
    client: usize,
    round: usize,
) -> Result<OutputDelta> {
    if !local.same_architecture(global) {
        return Err(Error::config(format!(
            "architecture mismatch: {:?} vs {:?}",
            local.layer_sizes(),
            global.layer_sizes()
        )));
    }
    let rows = (0..global.num_classes())
        .map(|l| {
            local
                .output_row(l)
                .iter()
                .zip(global.output_row(l))
                .map(|(a, b)| a - b)
                .collect()
        })
        .collect();
    Ok(OutputDelta {
        client,
        round,
        rows,
    })
}
