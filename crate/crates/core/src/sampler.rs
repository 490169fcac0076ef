//! Denoising schedule and the two kinds of sampling steps.
//!
//! Step `k` moves from noise level `τ_k` to `τ_{k+1}` with `τ_k = 1 − k/T`.
//! An ODE step follows the velocity field, `x ← x − v·Δτ`. An SDE step draws
//! from the Gaussian proposal
//!
//! ```text
//! μ = x − (v − ½σ_k²·score)·Δτ,     s = σ_k·sqrt(Δτ)
//! ```
//!
//! which is the Euler–Maruyama discretization of the marginal-preserving
//! stochastic process, integrated in the direction of decreasing noise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow_model::{VelocityField, VelocityModel};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    steps: usize,
    taus: Vec<f64>,
    tau_min: f64,
    noise_coeff: f64,
    sigmas: Vec<f64>,
}

/// Linear noise-level grid with `σ_k = a·sqrt(max(τ_{k+1}, τ_min))`.
pub fn make_schedule(steps: usize, tau_min: f64, noise_coeff: f64) -> Result<Schedule> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!(
            "horizon T = {steps} is too short, need at least 2 steps"
        )));
    }
    if !(tau_min > 0.0 && tau_min < 1.0 / steps as f64) {
        return Err(Error::InvalidArgument(format!(
            "tau_min = {tau_min} must lie in (0, 1/T) = (0, {})",
            1.0 / steps as f64
        )));
    }
    if !(noise_coeff >= 0.0 && noise_coeff.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise coefficient {noise_coeff} must be finite and nonnegative"
        )));
    }
    let mut taus: Vec<f64> = (0..=steps).map(|k| 1.0 - k as f64 / steps as f64).collect();
    taus[steps] = 0.0;
    let sigmas = (0..steps)
        .map(|k| noise_coeff * taus[k + 1].max(tau_min).sqrt())
        .collect();
    Ok(Schedule {
        steps,
        taus,
        tau_min,
        noise_coeff,
        sigmas,
    })
}

impl Schedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    pub fn tau(&self, k: usize) -> f64 {
        self.taus[k]
    }

    pub fn tau_min(&self) -> f64 {
        self.tau_min
    }

    pub fn noise_coeff(&self) -> f64 {
        self.noise_coeff
    }

    pub fn sigma(&self, k: usize) -> f64 {
        self.sigmas[k]
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn delta(&self, k: usize) -> f64 {
        self.taus[k] - self.taus[k + 1]
    }

    /// Proposal standard deviation `σ_k·sqrt(Δτ_k)`.
    pub fn step_std(&self, k: usize) -> f64 {
        self.sigmas[k] * self.delta(k).sqrt()
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k >= self.steps {
            return Err(Error::InvalidArgument(format!(
                "step {k} out of range for horizon {}",
                self.steps
            )));
        }
        Ok(())
    }

    /// `μ` as a function of the velocity at `(x, τ_k)`.
    pub fn proposal_mean(&self, x: &[f64], v: &[f64], k: usize) -> Vec<f64> {
        let delta = self.delta(k);
        let sigma2 = self.sigmas[k].powi(2);
        let tau_s = self.taus[k].max(self.tau_min);
        x.iter()
            .zip(v)
            .map(|(&x, &v)| {
                let score = -(x + (1.0 - tau_s) * v) / tau_s;
                x - (v - 0.5 * sigma2 * score) * delta
            })
            .collect()
    }

    /// `∂μ_i/∂v_i` (the proposal mean is affine in the velocity).
    pub fn mean_velocity_slope(&self, k: usize) -> f64 {
        let delta = self.delta(k);
        let sigma2 = self.sigmas[k].powi(2);
        let tau_s = self.taus[k].max(self.tau_min);
        -delta * (1.0 + sigma2 * (1.0 - tau_s) / (2.0 * tau_s))
    }
}

/// One stochastic step: where it started, what was drawn, and its density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub source: Vec<f64>,
    pub action: Vec<f64>,
    pub step: usize,
    pub condition: usize,
    pub mean: Vec<f64>,
    pub std: f64,
    /// Log-density of `action` under the behavior parameters at sampling time.
    pub logprob: f64,
}

/// Diagonal Gaussian with a shared scalar standard deviation.
pub fn gaussian_logpdf(x: &[f64], mean: &[f64], std: f64) -> f64 {
    let d = x.len() as f64;
    let var = std * std;
    let sq: f64 = x.iter().zip(mean).map(|(a, m)| (a - m).powi(2)).sum();
    -0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - sq / (2.0 * var)
}

pub fn ode_step(
    model: &impl VelocityModel,
    x: &[f64],
    k: usize,
    condition: usize,
    schedule: &Schedule,
) -> Result<Vec<f64>> {
    schedule.check_step(k)?;
    let v = model.velocity(x, schedule.tau(k), condition);
    Ok(ode_update(x, &v, schedule.delta(k)))
}

fn ode_update(x: &[f64], v: &[f64], delta: f64) -> Vec<f64> {
    x.iter().zip(v).map(|(x, v)| x - v * delta).collect()
}

/// ODE step applied to a row-major set of latents.
pub fn ode_step_batch(
    model: &impl VelocityModel,
    xs: &[f64],
    k: usize,
    conditions: &[usize],
    schedule: &Schedule,
) -> Result<Vec<f64>> {
    schedule.check_step(k)?;
    let taus = vec![schedule.tau(k); conditions.len()];
    let v = model.velocity_batch(xs, &taus, conditions);
    Ok(ode_update(xs, &v, schedule.delta(k)))
}

/// Gaussian proposal for an SDE step; shared by all children of one parent.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub source: Vec<f64>,
    pub step: usize,
    pub condition: usize,
    pub mean: Vec<f64>,
    pub std: f64,
}

impl Proposal {
    pub fn sample(&self, rng: &mut impl Rng) -> Transition {
        let eps = rng::standard_normal(rng, self.mean.len());
        let action: Vec<f64> = self
            .mean
            .iter()
            .zip(&eps)
            .map(|(m, e)| m + self.std * e)
            .collect();
        self.transition_to(action)
    }

    /// The transition record for a given child latent.
    pub fn transition_to(&self, action: Vec<f64>) -> Transition {
        let logprob = gaussian_logpdf(&action, &self.mean, self.std);
        Transition {
            source: self.source.clone(),
            action,
            step: self.step,
            condition: self.condition,
            mean: self.mean.clone(),
            std: self.std,
            logprob,
        }
    }
}

pub fn sde_proposal(
    model: &impl VelocityModel,
    x: &[f64],
    k: usize,
    condition: usize,
    schedule: &Schedule,
) -> Result<Proposal> {
    schedule.check_step(k)?;
    if schedule.sigma(k) <= 0.0 {
        return Err(Error::Precondition(format!(
            "SDE step requested at step {k} where the noise scale is zero"
        )));
    }
    let v = model.velocity(x, schedule.tau(k), condition);
    Ok(Proposal {
        source: x.to_vec(),
        step: k,
        condition,
        mean: schedule.proposal_mean(x, &v, k),
        std: schedule.step_std(k),
    })
}

pub fn sde_step(
    model: &impl VelocityModel,
    x: &[f64],
    k: usize,
    condition: usize,
    schedule: &Schedule,
    rng: &mut impl Rng,
) -> Result<Transition> {
    Ok(sde_proposal(model, x, k, condition, schedule)?.sample(rng))
}

/// Log-density of the stored action under the current model's proposal.
pub fn transition_logprob(
    model: &impl VelocityModel,
    transition: &Transition,
    schedule: &Schedule,
) -> f64 {
    let k = transition.step;
    let v = model.velocity(&transition.source, schedule.tau(k), transition.condition);
    let mean = schedule.proposal_mean(&transition.source, &v, k);
    gaussian_logpdf(&transition.action, &mean, transition.std)
}

/// Current log-densities of many transitions plus what is needed to
/// differentiate any weighted sum of them.
pub struct LogprobBatch {
    pub logprobs: Vec<f64>,
    cache: crate::flow_model::ForwardCache,
    /// `∂ logp_i / ∂v_i` per transition, row-major.
    d_velocity: Vec<f64>,
}

pub fn logprob_batch(
    model: &VelocityField,
    transitions: &[&Transition],
    schedule: &Schedule,
) -> LogprobBatch {
    let d = model.data_dim();
    let mut inputs = Vec::with_capacity(transitions.len() * model.input_dim());
    for t in transitions {
        model.push_features(&t.source, schedule.tau(t.step), t.condition, &mut inputs);
    }
    let cache = model.forward_batch(&inputs, transitions.len());
    let velocities = cache.output();
    let mut logprobs = Vec::with_capacity(transitions.len());
    let mut d_velocity = Vec::with_capacity(velocities.len());
    for (t, v) in transitions.iter().zip(velocities.chunks_exact(d)) {
        let mean = schedule.proposal_mean(&t.source, v, t.step);
        logprobs.push(gaussian_logpdf(&t.action, &mean, t.std));
        let slope = schedule.mean_velocity_slope(t.step);
        let var = t.std * t.std;
        d_velocity.extend(
            t.action
                .iter()
                .zip(&mean)
                .map(|(a, m)| slope * (a - m) / var),
        );
    }
    LogprobBatch {
        logprobs,
        cache,
        d_velocity,
    }
}

impl LogprobBatch {
    /// Accumulate `∇θ Σ_i coeffs[i]·logp_i` into `grad`.
    pub fn backward(&self, model: &VelocityField, coeffs: &[f64], grad: &mut [f64]) {
        let d = model.data_dim();
        assert_eq!(coeffs.len(), self.logprobs.len());
        let d_out: Vec<f64> = self
            .d_velocity
            .chunks_exact(d)
            .zip(coeffs)
            .flat_map(|(g, &c)| g.iter().map(move |x| c * x))
            .collect();
        model.backward_batch(&self.cache, &d_out, grad);
    }
}

/// Run the deterministic sampler from `x` at step 0 to the end.
pub fn sample_ode(
    model: &impl VelocityModel,
    x: &[f64],
    condition: usize,
    schedule: &Schedule,
) -> Result<Vec<f64>> {
    let mut x = x.to_vec();
    for k in 0..schedule.steps() {
        x = ode_step(model, &x, k, condition, schedule)?;
    }
    Ok(x)
}

/// Deterministic sampler over a row-major batch of starting latents.
pub fn sample_ode_batch(
    model: &impl VelocityModel,
    xs: &[f64],
    conditions: &[usize],
    schedule: &Schedule,
) -> Result<Vec<f64>> {
    let mut xs = xs.to_vec();
    for k in 0..schedule.steps() {
        xs = ode_step_batch(model, &xs, k, conditions, schedule)?;
    }
    Ok(xs)
}

/// Stochastic sampler: SDE steps wherever `stochastic(k)` holds, ODE elsewhere.
pub fn sample_sde(
    model: &impl VelocityModel,
    x: &[f64],
    condition: usize,
    schedule: &Schedule,
    stochastic: impl Fn(usize) -> bool,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let mut x = x.to_vec();
    for k in 0..schedule.steps() {
        x = if stochastic(k) {
            sde_step(model, &x, k, condition, schedule, rng)?.action
        } else {
            ode_step(model, &x, k, condition, schedule)?
        };
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verification::{finite_diff_grad, max_relative_error};

    struct Constant(Vec<f64>);

    impl VelocityModel for Constant {
        fn data_dim(&self) -> usize {
            self.0.len()
        }
        fn velocity(&self, _x: &[f64], _tau: f64, _c: usize) -> Vec<f64> {
            self.0.clone()
        }
    }

    #[test]
    fn linear_grid_with_eleven_levels() {
        let s = make_schedule(10, 0.02, 0.7).unwrap();
        assert_eq!(s.taus().len(), 11);
        assert_eq!(s.tau(0), 1.0);
        assert_eq!(s.tau(10), 0.0);
        for k in 0..=10 {
            assert!((s.tau(k) - (1.0 - k as f64 / 10.0)).abs() < 1e-15);
        }
        assert!(s.taus().windows(2).all(|w| w[0] > w[1]));
        assert!((s.sigma(0) - 0.7 * 0.9f64.sqrt()).abs() < 1e-15);
        assert!((s.sigma(9) - 0.7 * 0.02f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_noise_coefficient_zeroes_sigmas() {
        let s = make_schedule(10, 0.02, 0.0).unwrap();
        assert!(s.sigmas().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn invalid_schedules() {
        assert!(make_schedule(1, 0.02, 0.7).is_err());
        assert!(make_schedule(10, 0.2, 0.7).is_err());
        assert!(make_schedule(10, 0.0, 0.7).is_err());
        assert!(make_schedule(10, 0.02, -1.0).is_err());
    }

    #[test]
    fn ode_step_constant_fields() {
        let s = make_schedule(10, 0.02, 0.7).unwrap();
        let x = [0.5, -0.25];
        assert_eq!(
            ode_step(&Constant(vec![0.0, 0.0]), &x, 3, 0, &s).unwrap(),
            x.to_vec()
        );
        let next = ode_step(&Constant(vec![1.0, 1.0]), &x, 3, 0, &s).unwrap();
        assert!((next[0] - 0.4).abs() < 1e-12 && (next[1] + 0.35).abs() < 1e-12);
        assert!(ode_step(&Constant(vec![0.0, 0.0]), &x, 10, 0, &s).is_err());
    }

    #[test]
    fn zero_noise_mean_is_the_ode_step() {
        let s = make_schedule(10, 0.02, 0.0).unwrap();
        let m = Constant(vec![0.3, -1.1]);
        let x = [0.2, 0.9];
        for k in 0..10 {
            let v = m.velocity(&x, s.tau(k), 0);
            assert_eq!(
                s.proposal_mean(&x, &v, k),
                ode_step(&m, &x, k, 0, &s).unwrap()
            );
        }
    }

    #[test]
    fn small_noise_mean_approaches_ode_step() {
        let m = Constant(vec![0.3, -1.1]);
        let x = [0.2, 0.9];
        let mut prev = f64::INFINITY;
        for a in [0.5, 0.05, 0.005, 0.0005] {
            let s = make_schedule(10, 0.02, a).unwrap();
            let mean = sde_proposal(&m, &x, 2, 0, &s).unwrap().mean;
            let ode = ode_step(&m, &x, 2, 0, &s).unwrap();
            let gap = mean
                .iter()
                .zip(&ode)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(gap < prev);
            prev = gap;
        }
        assert!(prev < 1e-7);
    }

    #[test]
    fn sde_step_requires_noise() {
        let s = make_schedule(10, 0.02, 0.0).unwrap();
        let err = sde_step(
            &Constant(vec![0.0, 0.0]),
            &[0.0, 0.0],
            0,
            0,
            &s,
            &mut rng::stream(0, &[]),
        );
        assert!(matches!(err, Err(Error::Precondition(_))));
    }

    #[test]
    fn logprob_at_mean() {
        let s = make_schedule(10, 0.02, 0.7).unwrap();
        let p = sde_proposal(&Constant(vec![0.1, 0.2]), &[0.0, 0.0], 4, 0, &s).unwrap();
        let t = p.transition_to(p.mean.clone());
        let std = s.sigma(4) * s.delta(4).sqrt();
        let expected = -(2.0 / 2.0) * (2.0 * std::f64::consts::PI * std * std).ln();
        assert!((t.logprob - expected).abs() < 1e-12);
    }

    #[test]
    fn shifted_mean_lowers_logprob_quadratically() {
        let std = 0.3;
        let mean = [1.0, -2.0];
        let delta = 0.2;
        let base = gaussian_logpdf(&mean, &mean, std);
        let shifted = gaussian_logpdf(&[mean[0] + delta, mean[1]], &mean, std);
        assert!(((base - shifted) - delta * delta / (2.0 * std * std)).abs() < 1e-12);
    }

    #[test]
    fn recomputed_logprob_reproduces_stored_value() {
        let s = make_schedule(10, 0.02, 0.7).unwrap();
        let model = VelocityField::new(2, 2, &[16, 16], &mut rng::stream(1, &[]));
        let mut r = rng::stream(2, &[]);
        for k in 0..10 {
            let x = rng::standard_normal(&mut r, 2);
            let t = sde_step(&model, &x, k, k % 2, &s, &mut r).unwrap();
            let again = transition_logprob(&model, &t, &s);
            assert!((again - t.logprob).abs() < 1e-12);
            assert!(((again - t.logprob).exp() - 1.0).abs() < 1e-12);
            let batch = logprob_batch(&model, &[&t], &s);
            assert!((batch.logprobs[0] - t.logprob).abs() < 1e-12);
        }
    }

    #[test]
    fn logprob_gradient_matches_finite_differences() {
        let s = make_schedule(10, 0.02, 0.7).unwrap();
        let mut r = rng::stream(3, &[]);
        let behavior = VelocityField::new(2, 2, &[16, 16], &mut r);
        let mut model = behavior.clone();
        for p in model.params_mut() {
            *p += 0.05 * rng::standard_normal(&mut r, 1)[0];
        }
        let transitions: Vec<Transition> = (0..6)
            .map(|k| {
                let x = rng::standard_normal(&mut r, 2);
                sde_step(&behavior, &x, k, k % 2, &s, &mut r).unwrap()
            })
            .collect();
        let refs: Vec<&Transition> = transitions.iter().collect();
        let coeffs = [1.0, -0.5, 2.0, 0.3, -1.2, 0.7];
        let batch = logprob_batch(&model, &refs, &s);
        let mut grad = vec![0.0; model.num_params()];
        batch.backward(&model, &coeffs, &mut grad);
        let coords: Vec<usize> = (0..model.num_params()).step_by(3).collect();
        let numeric = finite_diff_grad(
            |p| {
                let mut m = model.clone();
                m.params_mut().copy_from_slice(p);
                transitions
                    .iter()
                    .zip(&coeffs)
                    .map(|(t, c)| c * transition_logprob(&m, t, &s))
                    .sum()
            },
            model.params(),
            1e-5,
            &coords,
        );
        let picked: Vec<f64> = coords.iter().map(|&i| grad[i]).collect();
        let err = max_relative_error(&picked, &numeric);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn ode_steps_commute_with_batch_layout() {
        let s = make_schedule(10, 0.02, 0.7).unwrap();
        let model = VelocityField::new(2, 2, &[16, 16], &mut rng::stream(7, &[]));
        let mut r = rng::stream(8, &[]);
        let xs = rng::standard_normal(&mut r, 2 * 9);
        let conds: Vec<usize> = (0..9).map(|i| i % 2).collect();
        let joint = sample_ode_batch(&model, &xs, &conds, &s).unwrap();
        for (i, x) in xs.chunks_exact(2).enumerate() {
            let single = sample_ode(&model, x, conds[i], &s).unwrap();
            assert_eq!(&joint[2 * i..2 * i + 2], single.as_slice());
        }
    }
}
