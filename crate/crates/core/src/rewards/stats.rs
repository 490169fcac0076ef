use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-8;
pub const DEFAULT_EMA_DECAY: f64 = 0.99;

/// Running per-model reward moments.
///
/// Tracks exponential moving averages of the first and second raw moments;
/// the first batch initializes both. Standard deviations use the population
/// convention and are floored at [`STD_FLOOR`].
#[derive(Debug, Clone, PartialEq)]
pub struct RewardStats {
    decay: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    count: u64,
}

impl RewardStats {
    pub fn new(num_models: usize, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!(
                "EMA decay {decay} outside [0, 1]"
            )));
        }
        Ok(Self {
            decay,
            first: vec![0.0; num_models],
            second: vec![0.0; num_models],
            count: 0,
        })
    }

    pub fn update_count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self, model: usize) -> f64 {
        self.first[model]
    }

    pub fn std(&self, model: usize) -> f64 {
        let var = (self.second[model] - self.first[model].powi(2)).max(0.0);
        var.sqrt().max(STD_FLOOR)
    }

    pub fn standardize(&self, model: usize, score: f64) -> f64 {
        (score - self.mean(model)) / self.std(model)
    }

    /// `batch[k]` holds this batch's raw scores for model `k`.
    pub fn update(&mut self, batch: &[Vec<f64>]) -> Result<()> {
        if batch.len() != self.first.len() {
            return Err(Error::InvalidArgument(format!(
                "expected scores for {} models, got {}",
                self.first.len(),
                batch.len()
            )));
        }
        if batch.iter().any(|b| b.is_empty()) {
            return Err(Error::InvalidArgument("empty reward batch".into()));
        }
        for (k, scores) in batch.iter().enumerate() {
            let n = scores.len() as f64;
            let m1 = scores.iter().sum::<f64>() / n;
            let m2 = scores.iter().map(|s| s * s).sum::<f64>() / n;
            if self.count == 0 {
                self.first[k] = m1;
                self.second[k] = m2;
            } else {
                let d = self.decay;
                self.first[k] = d * self.first[k] + (1.0 - d) * m1;
                self.second[k] = d * self.second[k] + (1.0 - d) * m2;
            }
        }
        self.count += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn first_batch_initializes_population_moments() {
        let mut s = RewardStats::new(1, 0.99).unwrap();
        s.update(&[vec![0.0, 2.0]]).unwrap();
        assert_eq!(s.mean(0), 1.0);
        assert_eq!(s.std(0), 1.0);
    }

    #[test]
    fn constant_batch_hits_floor() {
        let mut s = RewardStats::new(1, 0.99).unwrap();
        s.update(&[vec![4.0, 4.0, 4.0]]).unwrap();
        assert_eq!(s.std(0), STD_FLOOR);
    }

    #[test]
    fn unit_decay_freezes_after_first_batch() {
        let mut s = RewardStats::new(1, 1.0).unwrap();
        s.update(&[vec![0.0, 2.0]]).unwrap();
        s.update(&[vec![10.0, 30.0]]).unwrap();
        assert_eq!((s.mean(0), s.std(0)), (1.0, 1.0));
    }

    #[test]
    fn empty_batch_rejected() {
        let mut s = RewardStats::new(1, 0.9).unwrap();
        assert!(s.update(&[vec![]]).is_err());
    }

    #[test]
    fn standardized_stream_has_unit_moments() {
        let dist = Normal::new(3.0, 2.0).unwrap();
        let mut r = rng::stream(21, &[]);
        let mut s = RewardStats::new(1, DEFAULT_EMA_DECAY).unwrap();
        for _ in 0..1000 {
            let batch: Vec<f64> = (0..16).map(|_| dist.sample(&mut r)).collect();
            s.update(&[batch]).unwrap();
        }
        let z: Vec<f64> = (0..10_000)
            .map(|_| s.standardize(0, dist.sample(&mut r)))
            .collect();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64;
        assert!(mean.abs() < 0.1, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }
}
