//! Per-epoch choice of the contiguous branching window `{i, …, i+w−1}`.
//!
//! Valid starts are `0..T−w`, so the last denoising step is never inside the
//! window and always runs as an ODE step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "strategy")]
pub enum WindowStrategy {
    /// Truncated geometric law over the start index.
    Random {
        r: f64,
    },
    /// Cyclic shift by `stride` each epoch.
    Shifting {
        stride: usize,
    },
    Fixed {
        start: usize,
    },
}

impl WindowStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            WindowStrategy::Random { .. } => "random",
            WindowStrategy::Shifting { .. } => "shifting",
            WindowStrategy::Fixed { .. } => "fixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowPlan {
    pub start: usize,
    pub length: usize,
    pub strategy: WindowStrategy,
    pub epoch: usize,
    /// Uniform draw used for a random start.
    pub draw: Option<f64>,
}

impl WindowPlan {
    pub fn steps(&self) -> Vec<usize> {
        (self.start..self.start + self.length).collect()
    }
}

fn check_length(steps: usize, length: usize) -> Result<()> {
    if length < 1 || length + 1 > steps {
        return Err(Error::InvalidArgument(format!(
            "window length {length} must lie in [1, T−1] for T = {steps}"
        )));
    }
    Ok(())
}

/// `Pr[i] = (1 − r)·r^i / (1 − r^{T−w})` for `i = 0, …, T−w−1`.
pub fn window_start_mass(steps: usize, length: usize, r: f64) -> Result<Vec<f64>> {
    check_length(steps, length)?;
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "ratio r = {r} must lie in (0, 1)"
        )));
    }
    let n = steps - length;
    let norm = 1.0 - r.powi(n as i32);
    Ok((0..n)
        .map(|i| (1.0 - r) * r.powi(i as i32) / norm)
        .collect())
}

fn invert_mass(mass: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in mass.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    mass.len() - 1
}

pub fn sample_window_start(
    steps: usize,
    length: usize,
    r: f64,
    rng: &mut impl Rng,
) -> Result<usize> {
    let mass = window_start_mass(steps, length, r)?;
    Ok(invert_mass(&mass, rng.random::<f64>()))
}

/// Start `(epoch·stride) mod (T − w)`.
pub fn shifting_window(
    epoch: usize,
    steps: usize,
    length: usize,
    stride: usize,
) -> Result<WindowPlan> {
    check_length(steps, length)?;
    if stride < 1 {
        return Err(Error::InvalidArgument(
            "shifting stride must be at least 1".into(),
        ));
    }
    Ok(WindowPlan {
        start: (epoch * stride) % (steps - length),
        length,
        strategy: WindowStrategy::Shifting { stride },
        epoch,
        draw: None,
    })
}

/// Choose this epoch's window. Only the random strategy consumes `rng`.
pub fn plan_window(
    strategy: WindowStrategy,
    epoch: usize,
    steps: usize,
    length: usize,
    rng: &mut impl Rng,
) -> Result<WindowPlan> {
    match strategy {
        WindowStrategy::Random { r } => {
            let mass = window_start_mass(steps, length, r)?;
            let u = rng.random::<f64>();
            Ok(WindowPlan {
                start: invert_mass(&mass, u),
                length,
                strategy,
                epoch,
                draw: Some(u),
            })
        }
        WindowStrategy::Shifting { stride } => shifting_window(epoch, steps, length, stride),
        WindowStrategy::Fixed { start } => {
            check_length(steps, length)?;
            if start + length >= steps {
                return Err(Error::InvalidArgument(format!(
                    "fixed window start {start} must be below T − w = {}",
                    steps - length
                )));
            }
            Ok(WindowPlan {
                start,
                length,
                strategy,
                epoch,
                draw: None,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn first_mass_value() {
        let m = window_start_mass(10, 3, 0.5).unwrap();
        assert_eq!(m.len(), 7);
        assert!((m[0] - 0.5 / (1.0 - 0.5f64.powi(7))).abs() < 1e-15);
        assert!((m[0] - 0.503937).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn masses_sum_to_one(t in 2usize..40, w_frac in 0.0f64..1.0, r in 0.01f64..0.99) {
            let w = 1 + ((t - 2) as f64 * w_frac) as usize;
            let m = window_start_mass(t, w, r).unwrap();
            prop_assert_eq!(m.len(), t - w);
            prop_assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn near_one_is_uniform() {
        let m = window_start_mass(10, 3, 1.0 - 1e-9).unwrap();
        assert!(m.iter().all(|p| (p - 1.0 / 7.0).abs() < 1e-6));
    }

    #[test]
    fn smaller_ratio_favors_early_starts() {
        let low = window_start_mass(10, 3, 0.3).unwrap();
        let high = window_start_mass(10, 3, 0.7).unwrap();
        assert!(low[0] > high[0]);
    }

    #[test]
    fn invalid_ratio() {
        assert!(window_start_mass(10, 3, 0.0).is_err());
        assert!(window_start_mass(10, 3, 1.0).is_err());
        assert!(window_start_mass(10, 10, 0.5).is_err());
    }

    #[test]
    fn shifting_examples() {
        assert_eq!(shifting_window(0, 10, 3, 1).unwrap().start, 0);
        assert_eq!(shifting_window(7, 10, 3, 1).unwrap().start, 0);
        assert_eq!(shifting_window(3, 10, 3, 2).unwrap().start, 6);
        for e in 0..50 {
            let p = shifting_window(e, 10, 3, 3).unwrap();
            assert!(p.start + p.length < 10);
        }
    }

    #[test]
    fn empirical_frequencies_match_mass() {
        let mass = window_start_mass(10, 3, 0.5).unwrap();
        let mut r = rng::stream(99, &[]);
        let mut counts = [0usize; 7];
        let n = 100_000;
        for _ in 0..n {
            counts[sample_window_start(10, 3, 0.5, &mut r).unwrap()] += 1;
        }
        let dev = counts
            .iter()
            .zip(&mass)
            .map(|(&c, p)| (c as f64 / n as f64 - p).abs())
            .fold(0.0, f64::max);
        assert!(dev < 0.005, "max deviation {dev}");
    }

    #[test]
    fn fixed_plan_bounds() {
        let mut r = rng::stream(0, &[]);
        let p = plan_window(WindowStrategy::Fixed { start: 6 }, 0, 10, 3, &mut r).unwrap();
        assert_eq!(p.steps(), vec![6, 7, 8]);
        assert!(plan_window(WindowStrategy::Fixed { start: 7 }, 0, 10, 3, &mut r).is_err());
    }
}
