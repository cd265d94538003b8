use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{bce_loss, loss_and_grads_with, predict_proba, Mode};
use super::params::{ModelConfig, ModelParams};
use super::NetError;
use crate::features::{WindowBatch, NUM_FEATURES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 30,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch's minibatches (dropout active).
    pub loss: f64,
    /// Accuracy of the predictions made while training on the epoch.
    pub accuracy: f64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
}

/// Rows `idx` of a batch as a new batch.
pub fn gather(batch: &WindowBatch, idx: &[usize]) -> WindowBatch {
    let row = batch.sw * NUM_FEATURES;
    let mut values = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        values.extend_from_slice(&batch.values[i * row..(i + 1) * row]);
    }
    let labels = batch
        .labels
        .as_ref()
        .map(|l| idx.iter().map(|&i| l[i]).collect());
    WindowBatch {
        bs: idx.len(),
        sw: batch.sw,
        values,
        labels,
    }
}

/// Minibatch Adam on BCE. Deterministic for a fixed `train_cfg.seed` and
/// `model_cfg.seed`.
pub fn train(
    data: &WindowBatch,
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<(ModelParams, Vec<EpochMetrics>), NetError> {
    let params = ModelParams::init(model_cfg)?;
    train_from(params, data, train_cfg, model_cfg)
}

/// As [`train`], starting from given parameters.
pub fn train_from(
    mut params: ModelParams,
    data: &WindowBatch,
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<(ModelParams, Vec<EpochMetrics>), NetError> {
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| NetError::Data("training data has no labels".into()))?;
    if data.bs == 0 {
        return Err(NetError::Data("empty training set".into()));
    }
    let positives = labels.iter().filter(|y| **y == 1.0).count();
    if positives == 0 || positives == labels.len() {
        return Err(NetError::Data(format!(
            "single-class training set ({positives} positive of {})",
            labels.len()
        )));
    }
    if train_cfg.batch_size == 0 || train_cfg.learning_rate < 0.0 {
        return Err(NetError::Config("batch_size ≥ 1 and learning_rate ≥ 0 required".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut order: Vec<usize> = (0..data.bs).collect();
    let mut flat = params.to_flat();
    let mut adam = Adam::new(flat.len());
    let mut history = Vec::with_capacity(train_cfg.epochs);
    let mut step: u64 = 0;

    for epoch in 0..train_cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(train_cfg.batch_size) {
            let mb = gather(data, chunk);
            let y = mb.labels.clone().expect("labels present");
            let mode = Mode::Train {
                dropout_seed: train_cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step,
            };
            step += 1;
            let (loss, grads, probs) = loss_and_grads_with(&params, model_cfg, &mb, &y, mode, None)?;
            correct += count_correct(&y, &probs);
            loss_sum += loss * chunk.len() as f64;
            adam.step(&mut flat, &grads.to_flat(), train_cfg);
            params.load_flat(&flat)?;
            if !params.all_finite() {
                return Err(NetError::NonFinite(format!("parameters after step {step}")));
            }
        }
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / data.bs as f64,
            accuracy: correct as f64 / data.bs as f64,
        };
        tracing::debug!(epoch, loss = m.loss, accuracy = m.accuracy, "epoch done");
        history.push(m);
    }
    Ok((params, history))
}

fn count_correct(labels: &[f64], probs: &[f64]) -> usize {
    probs
        .iter()
        .zip(labels)
        .filter(|(p, y)| (**p > 0.5) == (**y == 1.0))
        .count()
}

/// Eval-mode loss and accuracy of `params` over a labeled batch, evaluated in
/// chunks of `chunk` windows.
pub fn evaluate(
    params: &ModelParams,
    model_cfg: &ModelConfig,
    data: &WindowBatch,
    chunk: usize,
) -> Result<(f64, f64), NetError> {
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| NetError::Data("evaluation data has no labels".into()))?;
    let probs = predict_all(params, model_cfg, data, chunk)?;
    let acc = count_correct(labels, &probs) as f64 / data.bs as f64;
    Ok((bce_loss(&probs, labels), acc))
}

/// Eval-mode probabilities for every window of a batch.
pub fn predict_all(
    params: &ModelParams,
    model_cfg: &ModelConfig,
    data: &WindowBatch,
    chunk: usize,
) -> Result<Vec<f64>, NetError> {
    let idx: Vec<usize> = (0..data.bs).collect();
    let mut out = Vec::with_capacity(data.bs);
    for c in idx.chunks(chunk.max(1)) {
        out.extend(predict_proba(params, model_cfg, &gather(data, c))?);
    }
    Ok(out)
}

/// Linearly separable windows: intent rows hold ratio ≈ 8, the rest ≈ 0.1,
/// with gaze scattered uniformly. Classes alternate, `n` windows in total.
pub fn separable_fixture(n: usize, sw: usize, seed: u64) -> WindowBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n * sw * NUM_FEATURES);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let intent = i % 2 == 0;
        for _ in 0..sw {
            values.push(rng.gen_range(0.0..1.0));
            values.push(rng.gen_range(0.0..1.0));
            values.push(if intent {
                8.0 + rng.gen_range(-0.2..0.2)
            } else {
                0.1 + rng.gen_range(-0.05..0.05)
            });
        }
        labels.push(if intent { 1.0 } else { 0.0 });
    }
    WindowBatch {
        bs: n,
        sw,
        values,
        labels: Some(labels),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_data_is_learned() {
        let data = separable_fixture(64, 30, 1);
        let cfg = ModelConfig::default();
        let tc = TrainConfig {
            epochs: 10,
            ..Default::default()
        };
        let (params, hist) = train(&data, &tc, &cfg).unwrap();
        assert!(hist.last().unwrap().loss < hist[0].loss);
        let (_, acc) = evaluate(&params, &cfg, &data, 64).unwrap();
        assert!(acc >= 0.99, "accuracy {acc}");
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let data = separable_fixture(16, 12, 2);
        let cfg = ModelConfig {
            dropout: 0.0,
            ..Default::default()
        };
        let tc = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            batch_size: 16,
            ..Default::default()
        };
        let (params, hist) = train(&data, &tc, &cfg).unwrap();
        assert_eq!(params, ModelParams::init(&cfg).unwrap());
        assert!(hist.iter().all(|m| (m.loss - hist[0].loss).abs() < 1e-12));
    }

    #[test]
    fn same_seed_same_params() {
        let data = separable_fixture(24, 12, 3);
        let cfg = ModelConfig::default();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..Default::default()
        };
        assert_eq!(train(&data, &tc, &cfg).unwrap().0, train(&data, &tc, &cfg).unwrap().0);
    }

    #[test]
    fn single_class_is_rejected() {
        let mut data = separable_fixture(8, 6, 4);
        data.labels = Some(vec![1.0; 8]);
        assert!(matches!(
            train(&data, &TrainConfig::default(), &ModelConfig::default()),
            Err(NetError::Data(_))
        ));
    }
}
