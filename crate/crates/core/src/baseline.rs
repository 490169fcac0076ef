//! Trajectory-level GRPO: `G` independent stochastic trajectories per prompt,
//! every step an SDE step, and each step credited with its trajectory's
//! terminal advantage.

use rayon::prelude::*;

use crate::advantage::{combine_multi_reward, CombineMode};
use crate::error::{Error, Result};
use crate::flow_model::VelocityModel;
use crate::grpo::{EdgeBatch, EdgeSample, PolicyState, UpdateMetrics};
use crate::rewards::{RewardSet, RewardStats};
use crate::rng::{self, domain};
use crate::sampler::{sde_step, Schedule, Transition};

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub terminal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub condition: usize,
    pub trajectories: Vec<Trajectory>,
    /// One advantage per trajectory, once assigned.
    pub advantages: Option<Vec<f64>>,
}

/// Sample `group` full stochastic trajectories. Trajectory `g` draws its
/// starting latent and all step noise from the stream `(seed, TRAJECTORY, g)`.
pub fn collect_trajectories(
    model: &impl VelocityModel,
    condition: usize,
    group: usize,
    schedule: &Schedule,
    seed: u64,
) -> Result<TrajectoryBatch> {
    if group < 2 {
        return Err(Error::InvalidArgument(format!(
            "group size {group} must be at least 2"
        )));
    }
    let trajectories = (0..group)
        .into_par_iter()
        .map(|g| {
            let mut r = rng::stream(seed, &[domain::TRAJECTORY, g as u64]);
            let mut x = rng::standard_normal(&mut r, model.data_dim());
            let mut transitions = Vec::with_capacity(schedule.steps());
            for k in 0..schedule.steps() {
                let t = sde_step(model, &x, k, condition, schedule, &mut r)?;
                x = t.action.clone();
                transitions.push(t);
            }
            Ok(Trajectory {
                transitions,
                terminal: x,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryBatch {
        condition,
        trajectories,
        advantages: None,
    })
}

impl TrajectoryBatch {
    pub fn terminals(&self) -> Vec<Vec<f64>> {
        self.trajectories
            .iter()
            .map(|t| t.terminal.clone())
            .collect()
    }

    /// Velocity evaluations spent: one per step per trajectory.
    pub fn nfe(&self) -> usize {
        self.trajectories.iter().map(|t| t.transitions.len()).sum()
    }

    pub fn set_advantages(&mut self, advantages: Vec<f64>) -> Result<()> {
        if advantages.len() != self.trajectories.len() {
            return Err(Error::InvalidArgument(format!(
                "{} advantages for {} trajectories",
                advantages.len(),
                self.trajectories.len()
            )));
        }
        self.advantages = Some(advantages);
        Ok(())
    }

    /// Every step of every trajectory, with the trajectory's advantage.
    pub fn edge_batch(&self) -> Result<EdgeBatch> {
        let advantages = self
            .advantages
            .as_ref()
            .ok_or_else(|| Error::Precondition("trajectory advantages not assigned".into()))?;
        let entries = self
            .trajectories
            .iter()
            .zip(advantages)
            .flat_map(|(traj, &a)| {
                traj.transitions.iter().map(move |t| EdgeSample {
                    transition: t.clone(),
                    advantage: a,
                })
            })
            .collect();
        EdgeBatch::new(entries)
    }
}

/// Collect, score and assign group-relative advantages for one prompt.
#[allow(clippy::too_many_arguments)]
pub fn trajectory_grpo_collect(
    model: &impl VelocityModel,
    condition: usize,
    group: usize,
    schedule: &Schedule,
    seed: u64,
    rewards: &RewardSet,
    mode: CombineMode,
    stats: Option<&RewardStats>,
) -> Result<TrajectoryBatch> {
    let mut batch = collect_trajectories(model, condition, group, schedule, seed)?;
    let raw = rewards.evaluate_many(&batch.terminals(), condition)?;
    batch.set_advantages(combine_multi_reward(&raw, &rewards.weights(), mode, stats)?)?;
    Ok(batch)
}

/// One policy update on the pooled steps of several prompts' trajectories.
pub fn baseline_update(
    state: &mut PolicyState,
    batches: &[TrajectoryBatch],
    schedule: &Schedule,
) -> Result<UpdateMetrics> {
    let mut edges = EdgeBatch::default();
    for b in batches {
        edges.extend(b.edge_batch()?);
    }
    state.update(&edges, schedule)
}
