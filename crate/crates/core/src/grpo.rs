//! Clipped per-edge surrogate and the policy update.
//!
//! For each stochastic edge with stored behavior log-probability, the ratio
//! `r = exp(log π_θ − log π_old)` enters `min(r·A, clip(r, 1−ε, 1+ε)·A)`.
//! There is no KL term.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::flow_model::{VelocityField, VelocityModel};
use crate::optim::{AdamW, AdamWConfig};
use crate::sampler::{logprob_batch, transition_logprob, Schedule, Transition};
use crate::tree::DenoiseTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossAggregation {
    /// Sum over edges.
    #[default]
    Sum,
    /// Mean over edges.
    Mean,
}

impl FromStr for LossAggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            other => Err(Error::InvalidArgument(format!(
                "unknown loss aggregation '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateConfig {
    pub clip_eps: f64,
    pub optimizer: AdamWConfig,
    pub inner_epochs: usize,
    /// Refresh the behavior snapshot after this many collected batches.
    pub refresh_every: usize,
    /// Edges per optimizer step; 0 means the whole batch.
    pub micro_batch: usize,
    pub aggregation: LossAggregation,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            optimizer: AdamWConfig::default(),
            inner_epochs: 1,
            refresh_every: 1,
            micro_batch: 0,
            aggregation: LossAggregation::Sum,
        }
    }
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0) {
            return Err(Error::Config(format!(
                "clip epsilon {} must be positive",
                self.clip_eps
            )));
        }
        if self.inner_epochs < 1 {
            return Err(Error::Config("inner epochs must be at least 1".into()));
        }
        if self.refresh_every < 1 {
            return Err(Error::Config(
                "behavior refresh cadence must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSample {
    pub transition: Transition,
    pub advantage: f64,
}

/// Stochastic edges with their advantages.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EdgeBatch {
    entries: Vec<EdgeSample>,
}

impl EdgeBatch {
    pub fn new(entries: Vec<EdgeSample>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if !(e.transition.std > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "edge {i} is deterministic (std = 0)"
                )));
            }
            ensure_finite(e.advantage, "edge advantage")?;
        }
        Ok(Self { entries })
    }

    /// All branching edges of backed-up trees.
    pub fn from_trees<'a>(trees: impl IntoIterator<Item = &'a DenoiseTree>) -> Result<Self> {
        let mut entries = Vec::new();
        for tree in trees {
            for e in tree.branching_edges() {
                let advantage = e.advantage.ok_or_else(|| {
                    Error::Precondition(format!("edge {} was not backed up", e.id))
                })?;
                entries.push(EdgeSample {
                    transition: e.transition.clone(),
                    advantage,
                });
            }
        }
        Self::new(entries)
    }

    pub fn entries(&self) -> &[EdgeSample] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn extend(&mut self, other: EdgeBatch) {
        self.entries.extend(other.entries);
    }
}

pub fn importance_ratio(
    model: &impl VelocityModel,
    transition: &Transition,
    schedule: &Schedule,
) -> Result<f64> {
    let ratio = (transition_logprob(model, transition, schedule) - transition.logprob).exp();
    ensure_finite(ratio, "importance ratio")
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub clip_fraction: f64,
    pub ratios: Vec<f64>,
}

/// Clipped surrogate loss, its gradient and the share of clipped edges.
///
/// An edge counts as clipped when the clipped branch is strictly smaller;
/// such edges contribute no gradient.
pub fn grpo_loss(
    model: &VelocityField,
    batch: &[EdgeSample],
    schedule: &Schedule,
    clip_eps: f64,
    aggregation: LossAggregation,
) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty edge batch".into()));
    }
    let transitions: Vec<&Transition> = batch.iter().map(|e| &e.transition).collect();
    let current = logprob_batch(model, &transitions, schedule);
    let scale = match aggregation {
        LossAggregation::Sum => 1.0,
        LossAggregation::Mean => 1.0 / batch.len() as f64,
    };
    let mut loss = 0.0;
    let mut clipped = 0usize;
    let mut ratios = Vec::with_capacity(batch.len());
    let mut coeffs = Vec::with_capacity(batch.len());
    for (e, &lp) in batch.iter().zip(&current.logprobs) {
        let ratio = ensure_finite((lp - e.transition.logprob).exp(), "importance ratio")?;
        let a = e.advantage;
        let unclipped = ratio * a;
        let clipped_term = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * a;
        if clipped_term < unclipped {
            clipped += 1;
            loss -= clipped_term;
            coeffs.push(0.0);
        } else {
            loss -= unclipped;
            // ∂(r·A)/∂θ = A·r·∇ log π_θ
            coeffs.push(-scale * a * ratio);
        }
        ratios.push(ratio);
    }
    let mut grad = vec![0.0; model.num_params()];
    current.backward(model, &coeffs, &mut grad);
    Ok(LossOutput {
        loss: ensure_finite(loss * scale, "surrogate loss")?,
        grad,
        clip_fraction: clipped as f64 / batch.len() as f64,
        ratios,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct UpdateMetrics {
    /// Surrogate loss of the first pass over the batch.
    pub loss: f64,
    /// Mean gradient L2 norm over applied steps.
    pub grad_norm: f64,
    /// Share of clipped edges over all passes.
    pub clip_fraction: f64,
    pub steps_applied: usize,
    pub steps_skipped: usize,
    /// Largest `|r − 1|` seen in the first pass.
    pub max_ratio_deviation: f64,
}

/// Optimize the surrogate on `batch`: `inner_epochs` passes, one optimizer
/// step per micro-batch in a fixed order. Steps with a non-finite gradient
/// are skipped and logged.
pub fn update_policy(
    model: &mut VelocityField,
    optimizer: &mut AdamW,
    batch: &EdgeBatch,
    schedule: &Schedule,
    config: &UpdateConfig,
) -> Result<UpdateMetrics> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty edge batch".into()));
    }
    let chunk = if config.micro_batch == 0 {
        batch.len()
    } else {
        config.micro_batch
    };
    let mut metrics = UpdateMetrics::default();
    let mut clipped_edges = 0.0;
    let mut seen_edges = 0usize;
    let mut norm_total = 0.0;
    for epoch in 0..config.inner_epochs {
        for micro in batch.entries().chunks(chunk) {
            let out = match grpo_loss(model, micro, schedule, config.clip_eps, config.aggregation) {
                Ok(out) => out,
                Err(Error::NonFinite(msg)) => {
                    log::warn!("skipping update step: {msg}");
                    metrics.steps_skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if epoch == 0 {
                metrics.loss += out.loss;
                let dev = out
                    .ratios
                    .iter()
                    .map(|r| (r - 1.0).abs())
                    .fold(0.0, f64::max);
                metrics.max_ratio_deviation = metrics.max_ratio_deviation.max(dev);
            }
            clipped_edges += out.clip_fraction * micro.len() as f64;
            seen_edges += micro.len();
            let norm = out.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                log::warn!("skipping update step: gradient norm {norm}");
                metrics.steps_skipped += 1;
                continue;
            }
            optimizer.step(model.params_mut(), &out.grad);
            norm_total += norm;
            metrics.steps_applied += 1;
        }
    }
    if config.aggregation == LossAggregation::Mean {
        metrics.loss /= batch.len().div_ceil(chunk) as f64;
    }
    if seen_edges > 0 {
        metrics.clip_fraction = clipped_edges / seen_edges as f64;
    }
    if metrics.steps_applied > 0 {
        metrics.grad_norm = norm_total / metrics.steps_applied as f64;
    }
    Ok(metrics)
}

/// Trainable parameters, the frozen behavior snapshot used for sampling, and
/// the optimizer state.
#[derive(Debug, Clone)]
pub struct PolicyState {
    pub policy: VelocityField,
    pub behavior: VelocityField,
    pub optimizer: AdamW,
    pub config: UpdateConfig,
    batches_since_refresh: usize,
}

impl PolicyState {
    pub fn new(model: VelocityField, config: UpdateConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(config.optimizer, model.num_params());
        Ok(Self {
            behavior: model.clone(),
            policy: model,
            optimizer,
            config,
            batches_since_refresh: 0,
        })
    }

    /// `θ_old ← θ`.
    pub fn refresh_behavior(&mut self) {
        self.behavior = self.policy.clone();
        self.batches_since_refresh = 0;
    }

    /// Update on one collected batch, then refresh the behavior snapshot if
    /// the cadence is reached.
    pub fn update(&mut self, batch: &EdgeBatch, schedule: &Schedule) -> Result<UpdateMetrics> {
        let metrics = update_policy(
            &mut self.policy,
            &mut self.optimizer,
            batch,
            schedule,
            &self.config,
        )?;
        self.batches_since_refresh += 1;
        if self.batches_since_refresh >= self.config.refresh_every {
            self.refresh_behavior();
        }
        Ok(metrics)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::sampler::{make_schedule, sde_step};
    use crate::verification::{finite_diff_grad, max_relative_error};
    use rand::Rng;

    fn setup(n: usize, seed: u64) -> (VelocityField, Vec<EdgeSample>, Schedule) {
        let s = make_schedule(10, 0.02, 0.7).unwrap();
        let mut r = rng::stream(seed, &[]);
        let model = VelocityField::new(2, 2, &[16, 16], &mut r);
        let edges = (0..n)
            .map(|i| {
                let x = rng::standard_normal(&mut r, 2);
                EdgeSample {
                    transition: sde_step(&model, &x, i % 9, i % 2, &s, &mut r).unwrap(),
                    advantage: r.random_range(-2.0..2.0),
                }
            })
            .collect();
        (model, edges, s)
    }

    fn perturbed(model: &VelocityField, scale: f64, seed: u64) -> VelocityField {
        let mut m = model.clone();
        let mut r = rng::stream(seed, &[]);
        for p in m.params_mut() {
            *p += scale * rng::standard_normal(&mut r, 1)[0];
        }
        m
    }

    #[test]
    fn on_policy_loss_is_negative_advantage_sum() {
        let (model, edges, s) = setup(12, 1);
        let out = grpo_loss(&model, &edges, &s, 0.2, LossAggregation::Sum).unwrap();
        let total: f64 = edges.iter().map(|e| e.advantage).sum();
        assert!((out.loss + total).abs() < 1e-12);
        assert_eq!(out.clip_fraction, 0.0);
        assert!(out.ratios.iter().all(|r| (r - 1.0).abs() < 1e-12));
    }

    fn edge_with_ratio(ratio: f64, advantage: f64) -> (VelocityField, EdgeSample, Schedule) {
        let (model, edges, s) = setup(1, 2);
        let mut e = edges[0].clone();
        e.transition.logprob -= ratio.ln();
        e.advantage = advantage;
        (model, e, s)
    }

    #[test]
    fn clip_arithmetic_positive_advantage() {
        let (model, e, s) = edge_with_ratio(1.5, 2.0);
        let out = grpo_loss(&model, &[e], &s, 0.2, LossAggregation::Sum).unwrap();
        assert!((out.loss + 2.4).abs() < 1e-12);
        assert_eq!(out.clip_fraction, 1.0);
        assert!(out.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn clip_arithmetic_negative_advantage() {
        let (model, e, s) = edge_with_ratio(0.5, -1.0);
        let out = grpo_loss(&model, &[e], &s, 0.2, LossAggregation::Sum).unwrap();
        assert!((out.loss - 0.8).abs() < 1e-12);
        assert_eq!(out.clip_fraction, 1.0);
    }

    #[test]
    fn ratio_identities() {
        let (model, edges, s) = setup(1, 3);
        let t = &edges[0].transition;
        assert!((importance_ratio(&model, t, &s).unwrap() - 1.0).abs() < 1e-12);
        let mut shifted = t.clone();
        shifted.logprob -= 2f64.ln();
        assert!((importance_ratio(&model, &shifted, &s).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ratio_matches_two_density_evaluations() {
        let (model, edges, s) = setup(8, 4);
        let moved = perturbed(&model, 0.05, 40);
        for e in &edges {
            let t = &e.transition;
            let v = moved.velocity(&t.source, s.tau(t.step), t.condition);
            let mean = s.proposal_mean(&t.source, &v, t.step);
            let d = t.action.len() as f64;
            let sq: f64 = t
                .action
                .iter()
                .zip(&mean)
                .map(|(a, m)| (a - m).powi(2))
                .sum();
            let new_density = (-sq / (2.0 * t.std * t.std)).exp()
                / (2.0 * std::f64::consts::PI * t.std * t.std).powf(d / 2.0);
            let sq_old: f64 = t
                .action
                .iter()
                .zip(&t.mean)
                .map(|(a, m)| (a - m).powi(2))
                .sum();
            let old_density = (-sq_old / (2.0 * t.std * t.std)).exp()
                / (2.0 * std::f64::consts::PI * t.std * t.std).powf(d / 2.0);
            let ratio = importance_ratio(&moved, t, &s).unwrap();
            let oracle = new_density / old_density;
            assert!(((ratio - oracle) / oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (model, edges, s) = setup(10, 5);
        let current = perturbed(&model, 0.02, 50);
        let eps = 0.2;
        let out = grpo_loss(&current, &edges, &s, eps, LossAggregation::Sum).unwrap();
        // Stay away from the clip kinks so the loss is smooth at this point.
        assert!(out
            .ratios
            .iter()
            .all(|r| ((r - 1.0).abs() - eps).abs() > 1e-3));
        let mut r = rng::stream(51, &[]);
        let coords: Vec<usize> = (0..150)
            .map(|_| r.random_range(0..current.num_params()))
            .collect();
        let numeric = finite_diff_grad(
            |p| {
                let mut m = current.clone();
                m.params_mut().copy_from_slice(p);
                grpo_loss(&m, &edges, &s, eps, LossAggregation::Sum)
                    .unwrap()
                    .loss
            },
            current.params(),
            1e-5,
            &coords,
        );
        let picked: Vec<f64> = coords.iter().map(|&i| out.grad[i]).collect();
        assert!(max_relative_error(&picked, &numeric) < 1e-4);
    }

    #[test]
    fn clipped_edges_contribute_no_gradient() {
        let (model, edges, s) = setup(6, 6);
        let current = perturbed(&model, 0.3, 60);
        let eps = 0.05;
        let all = grpo_loss(&current, &edges, &s, eps, LossAggregation::Sum).unwrap();
        assert!(all.clip_fraction > 0.0 && all.clip_fraction < 1.0);
        for (i, e) in edges.iter().enumerate() {
            let single = grpo_loss(
                &current,
                std::slice::from_ref(e),
                &s,
                eps,
                LossAggregation::Sum,
            )
            .unwrap();
            if single.clip_fraction == 1.0 {
                assert!(single.grad.iter().all(|g| *g == 0.0), "edge {i}");
            } else {
                assert!(single.grad.iter().any(|g| *g != 0.0), "edge {i}");
            }
        }
    }

    #[test]
    fn permutation_invariance() {
        let (model, edges, s) = setup(9, 7);
        let current = perturbed(&model, 0.05, 70);
        let a = grpo_loss(&current, &edges, &s, 0.2, LossAggregation::Sum).unwrap();
        let mut rev = edges.clone();
        rev.reverse();
        let b = grpo_loss(&current, &rev, &s, 0.2, LossAggregation::Sum).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
        assert!(a
            .grad
            .iter()
            .zip(&b.grad)
            .all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn ascent_increases_logprobs() {
        let (model, mut edges, s) = setup(16, 8);
        edges.iter_mut().for_each(|e| e.advantage = 1.0);
        let batch = EdgeBatch::new(edges).unwrap();
        let before: f64 = batch
            .entries()
            .iter()
            .map(|e| transition_logprob(&model, &e.transition, &s))
            .sum();
        let mut m = model.clone();
        let config = UpdateConfig {
            clip_eps: f64::INFINITY,
            optimizer: AdamWConfig {
                lr: 1e-3,
                weight_decay: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut opt = AdamW::new(config.optimizer, m.num_params());
        update_policy(&mut m, &mut opt, &batch, &s, &config).unwrap();
        let after: f64 = batch
            .entries()
            .iter()
            .map(|e| transition_logprob(&m, &e.transition, &s))
            .sum();
        assert!(after > before, "{before} -> {after}");
    }

    #[test]
    fn zero_advantages_only_decay() {
        let (model, mut edges, s) = setup(5, 9);
        edges.iter_mut().for_each(|e| e.advantage = 0.0);
        let batch = EdgeBatch::new(edges).unwrap();
        let config = UpdateConfig {
            optimizer: AdamWConfig {
                lr: 0.1,
                weight_decay: 0.01,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut m = model.clone();
        let mut opt = AdamW::new(config.optimizer, m.num_params());
        let metrics = update_policy(&mut m, &mut opt, &batch, &s, &config).unwrap();
        assert_eq!(metrics.grad_norm, 0.0);
        for (a, b) in m.params().iter().zip(model.params()) {
            assert_eq!(*a, b - 0.1 * 0.01 * b);
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (model, edges, s) = setup(5, 10);
        let batch = EdgeBatch::new(edges).unwrap();
        let config = UpdateConfig {
            optimizer: AdamWConfig {
                lr: 0.0,
                ..Default::default()
            },
            inner_epochs: 3,
            micro_batch: 2,
            ..Default::default()
        };
        let mut m = model.clone();
        let mut opt = AdamW::new(config.optimizer, m.num_params());
        let metrics = update_policy(&mut m, &mut opt, &batch, &s, &config).unwrap();
        assert_eq!(m, model);
        assert_eq!(metrics.steps_applied, 9);
    }

    #[test]
    fn refresh_resets_ratios() {
        let (model, edges, s) = setup(6, 11);
        let batch = EdgeBatch::new(edges).unwrap();
        let config = UpdateConfig {
            optimizer: AdamWConfig {
                lr: 1e-2,
                ..Default::default()
            },
            refresh_every: 100,
            ..Default::default()
        };
        let mut state = PolicyState::new(model, config).unwrap();
        state.update(&batch, &s).unwrap();
        assert_ne!(state.policy, state.behavior);
        state.refresh_behavior();
        assert_eq!(state.policy, state.behavior);
        // Re-sample with the refreshed behavior: first-pass ratios are exactly one.
        let mut r = rng::stream(12, &[]);
        let fresh: Vec<EdgeSample> = batch
            .entries()
            .iter()
            .map(|e| EdgeSample {
                transition: sde_step(
                    &state.behavior,
                    &e.transition.source,
                    e.transition.step,
                    e.transition.condition,
                    &s,
                    &mut r,
                )
                .unwrap(),
                advantage: e.advantage,
            })
            .collect();
        let out = grpo_loss(&state.policy, &fresh, &s, 0.2, LossAggregation::Sum).unwrap();
        assert_eq!(out.clip_fraction, 0.0);
        assert!(out.ratios.iter().all(|r| (r - 1.0).abs() < 1e-12));
    }

    #[test]
    fn deterministic_edges_are_rejected() {
        let (_, mut edges, _) = setup(1, 13);
        edges[0].transition.std = 0.0;
        assert!(EdgeBatch::new(edges).is_err());
    }
}
