use rand::Rng;

use super::{fm_loss, fm_loss_value, InterpolantPair, VelocityField};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::rewards::Task;
use crate::rng::{self, domain};

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Cosine-anneal the learning rate to 10% of its initial value.
    pub cosine_decay: bool,
    pub seed: u64,
    pub held_out_size: usize,
    /// Fail if the final held-out loss exceeds this value.
    pub max_held_out_loss: Option<f64>,
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 256,
            optimizer: AdamWConfig {
                lr: 2e-3,
                weight_decay: 0.0,
                ..Default::default()
            },
            cosine_decay: true,
            seed: 0,
            held_out_size: 4096,
            max_held_out_loss: None,
            log_every: 500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub model: VelocityField,
    /// `(step, training-batch loss)` pairs.
    pub loss_curve: Vec<(usize, f64)>,
    pub held_out_loss: f64,
}

/// Draw a flow-matching batch from `task` with conditions uniform over the
/// task's conditions.
pub fn sample_pairs(task: &Task, n: usize, rng: &mut impl Rng) -> Vec<InterpolantPair> {
    (0..n)
        .map(|_| {
            let condition = rng.random_range(0..task.num_conditions());
            let x0 = task.sample(condition, rng);
            let x1 = rng::standard_normal(rng, task.data_dim());
            let t = rng.random::<f64>();
            InterpolantPair {
                x0,
                x1,
                t,
                condition,
            }
        })
        .collect()
}

/// Fit `model` to `task` by minimizing the flow-matching loss.
pub fn pretrain(
    model: VelocityField,
    task: &Task,
    config: &PretrainConfig,
) -> Result<PretrainReport> {
    use super::VelocityModel;
    if model.data_dim() != task.data_dim() || model.num_conditions() != task.num_conditions() {
        return Err(Error::InvalidArgument(format!(
            "model ({}-D, {} conditions) does not match task '{}' ({}-D, {} conditions)",
            model.data_dim(),
            model.num_conditions(),
            task.name(),
            task.data_dim(),
            task.num_conditions()
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "pretraining batch size must be positive".into(),
        ));
    }
    let mut model = model;
    let mut opt = AdamW::new(config.optimizer, model.num_params());
    let base_lr = config.optimizer.lr;
    let mut loss_curve = Vec::new();

    for step in 0..config.steps {
        if config.cosine_decay {
            let progress = step as f64 / config.steps as f64;
            let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            opt.config.lr = base_lr * (0.1 + 0.9 * cosine);
        }
        let mut r = rng::stream(config.seed, &[domain::PRETRAIN, step as u64]);
        let batch = sample_pairs(task, config.batch_size, &mut r);
        let (loss, grad) = fm_loss(&model, &batch)
            .map_err(|e| Error::NonFinite(format!("pretraining step {step}: {e}")))?;
        if config.log_every > 0 && (step % config.log_every == 0 || step + 1 == config.steps) {
            loss_curve.push((step, loss));
            log::debug!("pretrain step {step}: loss {loss:.5}");
        }
        opt.step(model.params_mut(), &grad);
    }

    let mut r = rng::stream(config.seed, &[domain::HELD_OUT]);
    let held_out = sample_pairs(task, config.held_out_size.max(1), &mut r);
    let held_out_loss = fm_loss_value(&model, &held_out)?;
    if let Some(limit) = config.max_held_out_loss {
        if held_out_loss > limit {
            return Err(Error::Precondition(format!(
                "held-out flow-matching loss {held_out_loss:.4} exceeds threshold {limit}"
            )));
        }
    }
    Ok(PretrainReport {
        model,
        loss_curve,
        held_out_loss,
    })
}
