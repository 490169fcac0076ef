//! Conditional velocity field, flow-matching objective and score estimator.
//!
//! Conventions: the interpolant is `x_t = (1 − t)·x0 + t·x1` with `x0` a data
//! point and `x1 ~ N(0, I)`, so `t = 1` is pure noise. The network predicts the
//! direction `x1 − x0` given `(x_t, t, condition)`.

mod checkpoint;
mod mlp;
mod pretrain;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use mlp::{ForwardCache, VelocityField, DEFAULT_HIDDEN};
pub use pretrain::{pretrain, sample_pairs, PretrainConfig, PretrainReport};

use rayon::prelude::*;

use crate::error::{ensure_finite, Error, Result};

/// Default floor on the noise level used in the score denominator.
pub const DEFAULT_TAU_MIN: f64 = 0.02;

/// Anything that can supply a velocity `v(x, τ, c)`.
///
/// Implemented by the trainable [`VelocityField`] and by closed-form fields
/// used as ground truth in tests.
pub trait VelocityModel: Sync {
    fn data_dim(&self) -> usize;

    fn velocity(&self, x: &[f64], tau: f64, condition: usize) -> Vec<f64>;

    /// Evaluate many points at once. `xs` is row-major `n × data_dim`.
    fn velocity_batch(&self, xs: &[f64], taus: &[f64], conditions: &[usize]) -> Vec<f64> {
        let d = self.data_dim();
        let mut out = Vec::with_capacity(xs.len());
        for (row, (&tau, &c)) in xs.chunks_exact(d).zip(taus.iter().zip(conditions)) {
            out.extend(self.velocity(row, tau, c));
        }
        out
    }
}

/// One training example for the flow-matching objective.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolantPair {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub t: f64,
    pub condition: usize,
}

/// `(1 − t)·x0 + t·x1`.
pub fn interpolate(pair: &InterpolantPair) -> Result<Vec<f64>> {
    if pair.x0.len() != pair.x1.len() {
        return Err(Error::InvalidArgument(format!(
            "x0 has dimension {} but x1 has dimension {}",
            pair.x0.len(),
            pair.x1.len()
        )));
    }
    if !(0.0..=1.0).contains(&pair.t) {
        return Err(Error::InvalidArgument(format!(
            "interpolation time {} outside [0, 1]",
            pair.t
        )));
    }
    let t = pair.t;
    Ok(pair
        .x0
        .iter()
        .zip(&pair.x1)
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect())
}

const FM_CHUNK: usize = 64;

/// Mean squared flow-matching error over `batch` and its gradient with respect
/// to every parameter of `model`.
///
/// The batch is processed in fixed chunks whose partial sums are reduced in
/// chunk order, so the result does not depend on the thread count.
pub fn fm_loss(model: &VelocityField, batch: &[InterpolantPair]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty flow-matching batch".into()));
    }
    let d = model.data_dim();
    for pair in batch {
        if pair.x0.len() != d || pair.x1.len() != d {
            return Err(Error::InvalidArgument(format!(
                "pair dimension {}/{} does not match model data_dim {d}",
                pair.x0.len(),
                pair.x1.len()
            )));
        }
        if pair.condition >= model.num_conditions() {
            return Err(Error::InvalidArgument(format!(
                "condition {} out of range for {} conditions",
                pair.condition,
                model.num_conditions()
            )));
        }
    }
    let n = batch.len() as f64;
    let partials: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_chunks(FM_CHUNK)
        .map(|chunk| {
            let mut inputs = Vec::with_capacity(chunk.len() * model.input_dim());
            let mut targets = Vec::with_capacity(chunk.len() * d);
            for pair in chunk {
                let xt = interpolate(pair)?;
                model.push_features(&xt, pair.t, pair.condition, &mut inputs);
                targets.extend(pair.x1.iter().zip(&pair.x0).map(|(a, b)| a - b));
            }
            let cache = model.forward_batch(&inputs, chunk.len());
            let out = cache.output();
            let mut loss = 0.0;
            let mut d_out = vec![0.0; out.len()];
            for ((o, t), g) in out.iter().zip(&targets).zip(d_out.iter_mut()) {
                let r = o - t;
                loss += r * r;
                *g = 2.0 * r / n;
            }
            let mut grad = vec![0.0; model.num_params()];
            model.backward_batch(&cache, &d_out, &mut grad);
            Ok((loss, grad))
        })
        .collect();

    let mut loss = 0.0;
    let mut grad = vec![0.0; model.num_params()];
    for part in partials {
        let (l, g) = part?;
        loss += l;
        for (acc, x) in grad.iter_mut().zip(&g) {
            *acc += x;
        }
    }
    let loss = ensure_finite(loss / n, "flow-matching loss")?;
    Ok((loss, grad))
}

/// Flow-matching loss without the gradient.
pub fn fm_loss_value(model: &impl VelocityModel, batch: &[InterpolantPair]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty flow-matching batch".into()));
    }
    let mut total = 0.0;
    for pair in batch {
        let xt = interpolate(pair)?;
        let v = model.velocity(&xt, pair.t, pair.condition);
        total += v
            .iter()
            .zip(pair.x1.iter().zip(&pair.x0))
            .map(|(v, (a, b))| (v - (a - b)).powi(2))
            .sum::<f64>();
    }
    ensure_finite(total / batch.len() as f64, "flow-matching loss")
}

/// Marginal score `∇ log p_τ(x | c)` recovered from the velocity:
/// `E[x1 | x] = x + (1 − τ)·v` and `score = −E[x1 | x] / τ`.
pub fn score_estimate(
    model: &impl VelocityModel,
    x: &[f64],
    tau: f64,
    condition: usize,
    tau_min: f64,
) -> Result<Vec<f64>> {
    if tau < tau_min {
        return Err(Error::Precondition(format!(
            "score requested at noise level {tau} below floor {tau_min}"
        )));
    }
    let v = model.velocity(x, tau, condition);
    Ok(score_from_velocity(x, &v, tau))
}

pub(crate) fn score_from_velocity(x: &[f64], v: &[f64], tau: f64) -> Vec<f64> {
    x.iter()
        .zip(v)
        .map(|(x, v)| -(x + (1.0 - tau) * v) / tau)
        .collect()
}
