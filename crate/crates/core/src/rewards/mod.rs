//! Synthetic terminal rewards and the data distributions they are defined on.

mod stats;
mod task;

pub use stats::{RewardStats, DEFAULT_EMA_DECAY, STD_FLOOR};
pub use task::Task;

use crate::error::{Error, Result};

/// `−‖sample − m_c‖²` where `m_c` is the target mode of `condition`.
pub fn mode_proximity(sample: &[f64], condition: usize, modes: &[Vec<f64>]) -> Result<f64> {
    let mode = modes.get(condition).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "condition {condition} has no registered target mode ({} registered)",
            modes.len()
        ))
    })?;
    if mode.len() != sample.len() {
        return Err(Error::InvalidArgument(format!(
            "sample dimension {} does not match mode dimension {}",
            sample.len(),
            mode.len()
        )));
    }
    Ok(-sample
        .iter()
        .zip(mode)
        .map(|(s, m)| (s - m).powi(2))
        .sum::<f64>())
}

/// `−(‖sample‖ − ρ)²`.
pub fn ring_reward(sample: &[f64], radius: f64) -> f64 {
    let norm = sample.iter().map(|x| x * x).sum::<f64>().sqrt();
    -(norm - radius).powi(2)
}

#[derive(Debug, Clone, PartialEq)]
pub enum RewardKind {
    ModeProximity { modes: Vec<Vec<f64>> },
    Ring { radius: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardModelSpec {
    pub name: String,
    pub kind: RewardKind,
    pub weight: f64,
}

impl RewardModelSpec {
    pub fn mode_proximity(modes: Vec<Vec<f64>>, weight: f64) -> Self {
        Self {
            name: "mode_proximity".into(),
            kind: RewardKind::ModeProximity { modes },
            weight,
        }
    }

    pub fn ring(radius: f64, weight: f64) -> Self {
        Self {
            name: "ring".into(),
            kind: RewardKind::Ring { radius },
            weight,
        }
    }

    /// Build a registered reward by name for `task`.
    pub fn registered(name: &str, task: &Task, weight: f64, ring_radius: f64) -> Result<Self> {
        match name {
            "mode_proximity" => {
                let modes = (0..task.num_conditions())
                    .map(|c| task.target_mode(c))
                    .collect();
                Ok(Self::mode_proximity(modes, weight))
            }
            "ring" => Ok(Self::ring(ring_radius, weight)),
            other => Err(Error::Config(format!("unknown reward model '{other}'"))),
        }
    }

    pub fn evaluate(&self, sample: &[f64], condition: usize) -> Result<f64> {
        match &self.kind {
            RewardKind::ModeProximity { modes } => mode_proximity(sample, condition, modes),
            RewardKind::Ring { radius } => {
                if *radius <= 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "ring radius {radius} must be positive"
                    )));
                }
                Ok(ring_reward(sample, *radius))
            }
        }
    }
}

/// The active reward models of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardSet {
    specs: Vec<RewardModelSpec>,
}

impl RewardSet {
    /// Weights must be nonnegative and sum to one.
    pub fn new(specs: Vec<RewardModelSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config(
                "at least one reward model is required".into(),
            ));
        }
        if specs.iter().any(|s| !(s.weight >= 0.0)) {
            return Err(Error::Config("reward weights must be nonnegative".into()));
        }
        let total: f64 = specs.iter().map(|s| s.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "reward weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { specs })
    }

    pub fn specs(&self) -> &[RewardModelSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.specs.iter().map(|s| s.weight).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.name.clone()).collect()
    }

    /// Raw scores of one sample under every model, in declaration order.
    pub fn evaluate(&self, sample: &[f64], condition: usize) -> Result<Vec<f64>> {
        self.specs
            .iter()
            .map(|s| s.evaluate(sample, condition))
            .collect()
    }

    /// Scores for many samples, transposed to `[model][sample]`.
    pub fn evaluate_many(&self, samples: &[Vec<f64>], condition: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = vec![Vec::with_capacity(samples.len()); self.specs.len()];
        for s in samples {
            for (k, v) in self.evaluate(s, condition)?.into_iter().enumerate() {
                out[k].push(v);
            }
        }
        Ok(out)
    }
}
