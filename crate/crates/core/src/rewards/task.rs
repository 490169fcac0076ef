use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Registered synthetic data distributions.
#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    /// Two conditions, each a balanced mixture of two isotropic Gaussians in
    /// 2-D: condition 0 has modes at `(±offset, 0)`, condition 1 at
    /// `(0, ±offset)`. The target mode of each condition is the positive one.
    TwoMode { offset: f64, std: f64 },
    /// A single condition with data `N(mean, std²·I)`.
    Gaussian { mean: Vec<f64>, std: f64 },
}

impl Task {
    pub fn two_mode() -> Self {
        Task::TwoMode {
            offset: 1.5,
            std: 0.25,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "two_mode" => Ok(Self::two_mode()),
            "gaussian" => Ok(Task::Gaussian {
                mean: vec![1.0, -0.5],
                std: 0.5,
            }),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::TwoMode { .. } => "two_mode",
            Task::Gaussian { .. } => "gaussian",
        }
    }

    pub fn data_dim(&self) -> usize {
        match self {
            Task::TwoMode { .. } => 2,
            Task::Gaussian { mean, .. } => mean.len(),
        }
    }

    pub fn num_conditions(&self) -> usize {
        match self {
            Task::TwoMode { .. } => 2,
            Task::Gaussian { .. } => 1,
        }
    }

    /// The point the mode-proximity reward pulls `condition` towards.
    pub fn target_mode(&self, condition: usize) -> Vec<f64> {
        match self {
            Task::TwoMode { offset, .. } => match condition {
                0 => vec![*offset, 0.0],
                _ => vec![0.0, *offset],
            },
            Task::Gaussian { mean, .. } => mean.clone(),
        }
    }

    pub fn sample(&self, condition: usize, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            Task::TwoMode { offset, std } => {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let noise = rng::standard_normal(rng, 2);
                let center = if condition == 0 {
                    [sign * offset, 0.0]
                } else {
                    [0.0, sign * offset]
                };
                vec![center[0] + std * noise[0], center[1] + std * noise[1]]
            }
            Task::Gaussian { mean, std } => {
                let noise = rng::standard_normal(rng, mean.len());
                mean.iter().zip(noise).map(|(m, z)| m + std * z).collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_mode_samples_split_between_modes() {
        let task = Task::two_mode();
        let mut r = rng::stream(4, &[]);
        let xs: Vec<_> = (0..4000).map(|_| task.sample(0, &mut r)).collect();
        let right = xs.iter().filter(|x| x[0] > 0.0).count() as f64 / 4000.0;
        assert!((right - 0.5).abs() < 0.05);
        assert!(xs.iter().all(|x| x[1].abs() < 2.0));
    }

    #[test]
    fn unknown_task_is_an_error() {
        assert!(Task::by_name("imagenet").is_err());
    }
}
