//! Central finite-difference check of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::model::{bce_loss, forward, loss_and_grads_with, GradFault, Mode};
use super::params::{ModelConfig, ModelParams};
use super::NetError;
use crate::features::{WindowBatch, NUM_FEATURES};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub probes: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub sw: usize,
    pub step: f64,
    pub fault: Option<GradFault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            probes: 200,
            seed: 0,
            batch_size: 4,
            sw: 16,
            step: 1e-5,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeResult {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    /// Probes redrawn because the ±step perturbation crossed a ReLU kink or the
    /// probability clamp, where the loss is not differentiable.
    pub kinks_skipped: usize,
    pub worst: Option<ProbeResult>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare analytic gradients to central differences at randomly drawn
/// parameters, over a random batch, with dropout disabled.
pub fn gradient_check(
    params: &ModelParams,
    config: &ModelConfig,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, NetError> {
    if opts.probes == 0 {
        tracing::warn!("gradient check called with zero probes");
        return Ok(GradCheckReport {
            max_rel_error: 0.0,
            probes: 0,
            kinks_skipped: 0,
            worst: None,
        });
    }
    let cfg = ModelConfig {
        dropout: 0.0,
        ..config.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = opts.batch_size.max(2);
    let values: Vec<f64> = (0..n * opts.sw * NUM_FEATURES)
        .map(|i| {
            if i % NUM_FEATURES == 2 {
                rng.gen_range(0.0..10.0)
            } else {
                rng.gen_range(0.0..1.0)
            }
        })
        .collect();
    let labels: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    let batch = WindowBatch::from_values(n, opts.sw, values, Some(labels.clone()))
        .map_err(|e| NetError::Shape(e.to_string()))?;

    let (_, grads, _) = loss_and_grads_with(params, &cfg, &batch, &labels, Mode::Eval, opts.fault)?;
    let base_pattern = forward(params, &cfg, &batch, Mode::Eval)?.activation_pattern();

    let names: Vec<String> = params.tensors().into_iter().map(|(n, _, _)| n).collect();
    let sizes: Vec<usize> = params.tensors().iter().map(|(_, _, t)| t.len()).collect();
    let grad_tensors: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, _, t)| t.clone()).collect();
    let total: usize = sizes.iter().sum();

    let mut work = params.clone();
    let mut eval_at = |ti: usize, idx: usize, delta: f64| -> Result<(f64, u64), NetError> {
        let orig = work.tensors_mut()[ti][idx];
        work.tensors_mut()[ti][idx] = orig + delta;
        let tr = forward(&work, &cfg, &batch, Mode::Eval);
        work.tensors_mut()[ti][idx] = orig;
        let tr = tr?;
        Ok((bce_loss(&tr.y_hat, &labels), tr.activation_pattern()))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        probes: 0,
        kinks_skipped: 0,
        worst: None,
    };
    let max_draws = opts.probes * 20;
    let mut draws = 0;
    while report.probes < opts.probes && draws < max_draws {
        draws += 1;
        let flat = rng.gen_range(0..total);
        let (mut ti, mut idx) = (0, flat);
        while idx >= sizes[ti] {
            idx -= sizes[ti];
            ti += 1;
        }
        let (lp, pp) = eval_at(ti, idx, opts.step)?;
        let (lm, pm) = eval_at(ti, idx, -opts.step)?;
        if pp != base_pattern || pm != base_pattern {
            report.kinks_skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * opts.step);
        let analytic = grad_tensors[ti][idx];
        let rel = relative_error(analytic, numeric);
        report.probes += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some(ProbeResult {
                tensor: names[ti].clone(),
                index: idx,
                analytic,
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(report)
}
