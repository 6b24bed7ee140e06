use std::io::Write;

use rand::Rng;
use ul2_core::{Example, PathLabel, RngStream};

use crate::config::ToyConfig;
use crate::model::{Prepared, ToyModel};
use crate::tape::Mat;
use crate::ToyError;

/// Relative errors below this gradient magnitude are measured against it
/// instead, so exact zeros do not divide by zero.
pub const GRAD_FLOOR: f64 = 1e-6;

pub const MIN_GRAD_SAMPLES: usize = 200;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub samples: usize,
    /// Name of the parameter where the worst error occurred.
    pub worst: String,
}

/// Compare analytic gradients with central differences on sampled
/// parameter entries. Samples are spread round-robin over the parameter
/// tensors so small tensors are covered.
pub fn grad_check(model: &ToyModel, batch: &[Prepared], epsilon: f64, samples: usize, seed: u64) -> Result<GradCheckReport, ToyError> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(ToyError::Epsilon(epsilon));
    }
    let samples = samples.max(MIN_GRAD_SAMPLES);
    let (_, grads) = model.loss_and_grad(batch)?;
    let mut rng = RngStream::new(seed).derive(PathLabel::Op("grad-check"));
    let mut probe = model.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, samples, worst: String::new() };
    for s in 0..samples {
        let pi = s % model.params.len();
        let k = rng.random_range(0..model.params[pi].data.len());
        let original = probe.params[pi].data[k];
        probe.params[pi].data[k] = original + epsilon;
        let plus = probe.forward_prepared(batch)?.loss;
        probe.params[pi].data[k] = original - epsilon;
        let minus = probe.forward_prepared(batch)?.loss;
        probe.params[pi].data[k] = original;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let analytic = grads[pi].data[k];
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(GRAD_FLOOR);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = model.param_names()[pi].clone();
        }
    }
    Ok(report)
}

pub fn grad_norm(grads: &[Mat]) -> f64 {
    grads.iter().flat_map(|g| &g.data).map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ToyModel,
    /// Mean batch loss before each update.
    pub losses: Vec<f64>,
}

/// SGD with heavy-ball momentum. Batches walk the examples in order,
/// wrapping around; with `batch_size >= examples.len()` every step sees
/// the whole set.
pub fn train_toy(config: &ToyConfig, examples: &[Example], steps: usize, lr: f64) -> Result<TrainOutcome, ToyError> {
    if steps == 0 {
        return Err(ToyError::Config("steps must be at least 1".into()));
    }
    if !(lr.is_finite() && lr > 0.0) {
        return Err(ToyError::Config(format!("lr must be positive, got {lr}")));
    }
    if examples.is_empty() {
        return Err(ToyError::EmptyBatch);
    }
    let mut model = ToyModel::new(config.clone())?;
    let prepared = examples.iter().map(|e| model.prepare(e)).collect::<Result<Vec<_>, _>>()?;
    let bs = config.batch_size.min(prepared.len());
    let mut velocity: Vec<Mat> = model.params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let start = (step * bs) % prepared.len();
        let batch: Vec<Prepared> = (0..bs).map(|i| prepared[(start + i) % prepared.len()].clone()).collect();
        let (loss, grads) = model.loss_and_grad(&batch)?;
        if !loss.is_finite() {
            return Err(ToyError::Diverged { step, loss });
        }
        losses.push(loss);
        for ((p, v), g) in model.params.iter_mut().zip(&mut velocity).zip(&grads) {
            for ((x, m), d) in p.data.iter_mut().zip(&mut v.data).zip(&g.data) {
                *m = config.momentum * *m + d;
                *x -= lr * *m;
            }
        }
    }
    Ok(TrainOutcome { model, losses })
}

/// `step,loss` CSV with a header row.
pub fn write_trace<W: Write>(mut w: W, losses: &[f64]) -> std::io::Result<()> {
    writeln!(w, "step,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{i},{l:.17e}")?;
    }
    w.flush()
}
