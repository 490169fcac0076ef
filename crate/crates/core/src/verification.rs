//! Reference oracles and the self-check suite behind `treegrpo verify`.
//!
//! Everything here is written from the defining formulas, independently of
//! the production code paths it is compared against.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::advantage::{backup, effective_sample_size};
use crate::error::{Error, Result};
use crate::flow_model::{fm_loss, fm_loss_value, InterpolantPair, VelocityField, VelocityModel};
use crate::grpo::{grpo_loss, EdgeSample, LossAggregation};
use crate::rng::{self, domain};
use crate::sampler::{make_schedule, sample_ode, sample_sde, sde_step, Schedule};
use crate::scheduler::{sample_window_start, window_start_mass};
use crate::tree::{build_tree, nfe_count, trajectory_nfe, tree_stats, DenoiseTree, EdgeKind};

/// Central differences of `f` at `params` along the listed coordinates.
pub fn finite_diff_grad(
    f: impl Fn(&[f64]) -> f64,
    params: &[f64],
    step: f64,
    coords: &[usize],
) -> Vec<f64> {
    let mut p = params.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = p[i];
            p[i] = orig + step;
            let up = f(&p);
            p[i] = orig - step;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `max_i |a_i − b_i| / max(|a_i|, |b_i|, 1e-6)`.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Number of nodes expanded by a tree with the given window: at step `k`
/// the frontier holds `b^(window steps before k)` nodes.
pub fn frontier_nfe(steps: usize, window: &[usize], branch: usize) -> usize {
    (0..steps)
        .map(|k| branch.pow(window.iter().filter(|&&w| w < k).count() as u32))
        .sum()
}

/// Edge advantages computed by direct recursion over the tree.
///
/// Leaf edges keep their stored value; every other edge gets the
/// `exp(logprob)`-weighted mean of its child node's outgoing edges.
pub fn backup_oracle(tree: &DenoiseTree) -> Vec<Option<f64>> {
    fn node_value(tree: &DenoiseTree, node: usize, out: &mut Vec<Option<f64>>) -> Option<f64> {
        let children = &tree.nodes[node].children;
        let mut num = 0.0;
        let mut den = 0.0;
        for &e in children {
            let a = edge_value(tree, e, out)?;
            let w = tree.edges[e].transition.logprob.exp();
            num += w * a;
            den += w;
        }
        Some(num / den)
    }
    fn edge_value(tree: &DenoiseTree, e: usize, out: &mut Vec<Option<f64>>) -> Option<f64> {
        let child = tree.edges[e].child;
        let value = if tree.nodes[child].children.is_empty() {
            tree.edges[e].advantage
        } else {
            node_value(tree, child, out)
        };
        out[e] = value;
        value
    }
    let mut out = vec![None; tree.edges.len()];
    node_value(tree, 0, &mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceProbe {
    pub empirical: f64,
    pub predicted: f64,
}

/// Monte-Carlo variance of `Σ w_k·A_k` for independent `A_k ~ N(0, σ²)`,
/// next to the closed form `σ²·Σ w_k²`.
pub fn variance_probe(
    weights: &[f64],
    sigma_env: f64,
    trials: usize,
    seed: u64,
) -> Result<VarianceProbe> {
    if weights.is_empty() || trials < 2 {
        return Err(Error::InvalidArgument(
            "variance probe needs weights and at least 2 trials".into(),
        ));
    }
    let mut r = rng::stream(seed, &[domain::VERIFY, 1]);
    let draws: Vec<f64> = (0..trials)
        .map(|_| {
            let z = rng::standard_normal(&mut r, weights.len());
            weights.iter().zip(&z).map(|(w, z)| w * sigma_env * z).sum()
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / trials as f64;
    let empirical = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
    let predicted = sigma_env * sigma_env * weights.iter().map(|w| w * w).sum::<f64>();
    Ok(VarianceProbe {
        empirical,
        predicted,
    })
}

/// Flow model for data `N(m, s²·I)`, where the optimal velocity, the score of
/// every intermediate marginal and its density are known in closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticGaussian {
    pub mean: Vec<f64>,
    pub std: f64,
}

pub fn analytic_gaussian_case(mean: &[f64], std: f64) -> Result<AnalyticGaussian> {
    if !(std > 0.0) || mean.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "analytic case needs std > 0, got {std}"
        )));
    }
    Ok(AnalyticGaussian {
        mean: mean.to_vec(),
        std,
    })
}

impl AnalyticGaussian {
    /// Variance of each coordinate of `x_τ`.
    pub fn marginal_var(&self, tau: f64) -> f64 {
        let s2 = self.std * self.std;
        (1.0 - tau).powi(2) * s2 + tau * tau
    }

    /// `∇ log p_τ(x)`.
    pub fn score(&self, x: &[f64], tau: f64) -> Vec<f64> {
        let var = self.marginal_var(tau);
        x.iter()
            .zip(&self.mean)
            .map(|(x, m)| -(x - (1.0 - tau) * m) / var)
            .collect()
    }

    pub fn log_density(&self, x: &[f64], tau: f64) -> f64 {
        let var = self.marginal_var(tau);
        let d = x.len() as f64;
        let sq: f64 = x
            .iter()
            .zip(&self.mean)
            .map(|(x, m)| (x - (1.0 - tau) * m).powi(2))
            .sum();
        -0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - sq / (2.0 * var)
    }

    pub fn sample_data(&self, rng: &mut impl Rng) -> Vec<f64> {
        let z = rng::standard_normal(rng, self.mean.len());
        self.mean
            .iter()
            .zip(&z)
            .map(|(m, z)| m + self.std * z)
            .collect()
    }
}

impl VelocityModel for AnalyticGaussian {
    fn data_dim(&self) -> usize {
        self.mean.len()
    }

    fn velocity(&self, x: &[f64], tau: f64, _condition: usize) -> Vec<f64> {
        let s2 = self.std * self.std;
        let gain = (tau - (1.0 - tau) * s2) / self.marginal_var(tau);
        x.iter()
            .zip(&self.mean)
            .map(|(x, m)| gain * (x - (1.0 - tau) * m) - m)
            .collect()
    }
}

/// `2·E‖X − Y‖ − E‖X − X'‖ − E‖Y − Y'‖`, with the within-set terms taken over
/// distinct pairs.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(
            "energy distance needs at least 2 samples per set".into(),
        ));
    }
    fn dist(x: &[f64], y: &[f64]) -> f64 {
        x.iter()
            .zip(y)
            .map(|(p, q)| (p - q).powi(2))
            .sum::<f64>()
            .sqrt()
    }
    // Row sums run in parallel; the final reduction is sequential so the
    // result does not depend on thread scheduling.
    let cross: f64 = a
        .par_iter()
        .map(|x| b.iter().map(|y| dist(x, y)).sum::<f64>())
        .collect::<Vec<_>>()
        .iter()
        .sum();
    let within = |s: &[Vec<f64>]| -> f64 {
        let total: f64 = s
            .par_iter()
            .enumerate()
            .map(|(i, x)| s[i + 1..].iter().map(|y| dist(x, y)).sum::<f64>())
            .collect::<Vec<_>>()
            .iter()
            .sum();
        2.0 * total / (s.len() * (s.len() - 1)) as f64
    };
    Ok(2.0 * cross / (a.len() * b.len()) as f64 - within(a) - within(b))
}

/// One line of the self-check report.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {:>2} {:<28} {:>7.2}s  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.seconds,
            self.detail
        )
    }
}

fn timed(
    id: usize,
    name: &'static str,
    check: impl FnOnce() -> Result<(bool, String)>,
) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = match check() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckOutcome {
        id,
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn check_tree_combinatorics() -> Result<(bool, String)> {
    let table = [
        ((3, 3, 1), (27, 13)),
        ((3, 3, 2), (54, 26)),
        ((2, 3, 1), (8, 7)),
        ((2, 3, 2), (16, 14)),
        ((2, 4, 1), (16, 15)),
        ((4, 3, 1), (64, 21)),
    ];
    let mut bad = Vec::new();
    for ((b, d, trees), expected) in table {
        let got = tree_stats(b, d, trees)?;
        if got != expected {
            bad.push(format!(
                "({b},{d},{trees}) -> {got:?}, expected {expected:?}"
            ));
        }
    }
    // Built trees agree with the closed form.
    let schedule = make_schedule(10, 0.02, 0.7)?;
    let model = VelocityField::new(2, 2, &[8], &mut rng::stream(0, &[domain::VERIFY, 2]));
    for ((b, d, _), (leaves, internal)) in table.iter().filter(|(k, _)| k.2 == 1) {
        let window: Vec<usize> = (2..2 + *d as usize).collect();
        let tree = build_tree(&model, 0, 3, &schedule, &window, *b)?;
        if tree.leaves.len() != *leaves || tree.branching_internal_nodes() != *internal {
            bad.push(format!("built tree (b={b}, d={d}) has wrong shape"));
        }
    }
    Ok((
        bad.is_empty(),
        if bad.is_empty() {
            "6/6 rows exact".into()
        } else {
            bad.join("; ")
        },
    ))
}

/// A tree with random branching log-probabilities and leaf advantages.
pub fn random_backup_tree(seed: u64) -> Result<DenoiseTree> {
    let mut r = rng::stream(seed, &[domain::VERIFY, 3]);
    let branch = r.random_range(2..=4usize);
    let depth = r.random_range(1..=4usize);
    let steps = 6;
    let start = r.random_range(0..steps - depth);
    let window: Vec<usize> = (start..start + depth).collect();
    let schedule = make_schedule(steps, 0.02, 0.7)?;
    let model = VelocityField::new(2, 2, &[4], &mut r);
    let mut tree = build_tree(
        &model,
        r.random_range(0..2),
        seed,
        &schedule,
        &window,
        branch,
    )?;
    for e in tree
        .edges
        .iter_mut()
        .filter(|e| e.kind == EdgeKind::Branching)
    {
        e.transition.logprob = r.random_range(-5.0..0.0);
    }
    let adv: Vec<f64> = (0..tree.leaves.len())
        .map(|_| r.random_range(-3.0..3.0))
        .collect();
    tree.set_leaf_advantages(&adv)?;
    Ok(tree)
}

pub fn check_backup_oracle(trees: usize) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for i in 0..trees {
        let mut tree = random_backup_tree(i as u64)?;
        let expected = backup_oracle(&tree);
        backup(&mut tree)?;
        for (e, want) in tree.edges.iter().zip(&expected) {
            let (Some(got), Some(want)) = (e.advantage, want) else {
                return Ok((
                    false,
                    format!("tree {i}: edge {} missing an advantage", e.id),
                ));
            };
            worst = worst.max((got - want).abs());
        }
    }
    Ok((
        worst < 1e-9,
        format!("{trees} trees, max |dev| = {worst:.3e}"),
    ))
}

pub fn check_window_law(draws: usize) -> Result<(bool, String)> {
    let (steps, length, r) = (10, 3, 0.5);
    let mass = window_start_mass(steps, length, r)?;
    let closed_form = (1.0 - r) / (1.0 - r.powi((steps - length) as i32));
    let p0_err = (mass[0] - closed_form).abs();
    let p0_rounded = (mass[0] - 0.503937).abs() < 5e-7;
    let mut counts = vec![0usize; mass.len()];
    let mut rng = rng::stream(0, &[domain::VERIFY, 4]);
    for _ in 0..draws {
        counts[sample_window_start(steps, length, r, &mut rng)?] += 1;
    }
    let dev = counts
        .iter()
        .zip(&mass)
        .map(|(&c, p)| (c as f64 / draws as f64 - p).abs())
        .fold(0.0, f64::max);
    Ok((
        dev < 0.005 && p0_err < 1e-9 && p0_rounded,
        format!("Pr[0] = {:.9}, max empirical dev = {dev:.4}", mass[0]),
    ))
}

fn random_pairs(n: usize, r: &mut impl Rng) -> Vec<InterpolantPair> {
    (0..n)
        .map(|i| InterpolantPair {
            x0: rng::standard_normal(r, 2),
            x1: rng::standard_normal(r, 2),
            t: r.random::<f64>(),
            condition: i % 2,
        })
        .collect()
}

pub fn check_gradients(coords: usize) -> Result<(bool, String)> {
    let mut r = rng::stream(0, &[domain::VERIFY, 5]);
    let model = VelocityField::new(2, 2, &[32, 32], &mut r);
    let pairs = random_pairs(32, &mut r);
    let (_, fm_grad) = fm_loss(&model, &pairs)?;
    let picks: Vec<usize> = (0..coords)
        .map(|_| r.random_range(0..model.num_params()))
        .collect();
    let numeric = finite_diff_grad(
        |p| {
            let mut m = model.clone();
            m.params_mut().copy_from_slice(p);
            fm_loss_value(&m, &pairs).unwrap_or(f64::NAN)
        },
        model.params(),
        1e-5,
        &picks,
    );
    let analytic: Vec<f64> = picks.iter().map(|&i| fm_grad[i]).collect();
    let fm_err = max_relative_error(&analytic, &numeric);

    // Surrogate gradient at a point away from θ_old, with ratios off the clip kinks.
    let schedule = make_schedule(10, 0.02, 0.7)?;
    let edges: Vec<EdgeSample> = (0..12)
        .map(|i| {
            let x = rng::standard_normal(&mut r, 2);
            Ok(EdgeSample {
                transition: sde_step(&model, &x, i % 9, i % 2, &schedule, &mut r)?,
                advantage: r.random_range(-2.0..2.0),
            })
        })
        .collect::<Result<_>>()?;
    let mut current = model.clone();
    for p in current.params_mut() {
        *p += 0.01 * rng::standard_normal(&mut r, 1)[0];
    }
    let eps = 0.2;
    let out = grpo_loss(&current, &edges, &schedule, eps, LossAggregation::Sum)?;
    let near_kink = out
        .ratios
        .iter()
        .any(|q| ((q - 1.0).abs() - eps).abs() < 1e-3);
    let picks: Vec<usize> = (0..coords)
        .map(|_| r.random_range(0..current.num_params()))
        .collect();
    let numeric = finite_diff_grad(
        |p| {
            let mut m = current.clone();
            m.params_mut().copy_from_slice(p);
            grpo_loss(&m, &edges, &schedule, eps, LossAggregation::Sum)
                .map(|o| o.loss)
                .unwrap_or(f64::NAN)
        },
        current.params(),
        1e-5,
        &picks,
    );
    let analytic: Vec<f64> = picks.iter().map(|&i| out.grad[i]).collect();
    let grpo_err = max_relative_error(&analytic, &numeric);
    Ok((
        fm_err < 1e-4 && grpo_err < 1e-4 && !near_kink,
        format!("{coords} coords each: fm rel err {fm_err:.2e}, grpo rel err {grpo_err:.2e}"),
    ))
}

pub fn check_variance_reduction(trials: usize) -> Result<(bool, String)> {
    let sigma = 1.3;
    let pair = variance_probe(&[0.25, 0.75], sigma, trials, 1)?;
    let equal = variance_probe(&[0.25; 4], sigma, trials, 2)?;
    let rel = |p: &VarianceProbe| (p.empirical - p.predicted).abs() / p.predicted;
    let ess_pair = effective_sample_size(&[0.25, 0.75])?;
    let ess_equal = effective_sample_size(&[0.25; 4])?;
    let passed = rel(&pair) < 0.1 && rel(&equal) < 0.1 && ess_pair == 1.6 && ess_equal == 4.0;
    Ok((
        passed,
        format!(
            "var {:.4}/{:.4} and {:.4}/{:.4} (emp/pred), ESS {ess_pair} and {ess_equal}",
            pair.empirical, pair.predicted, equal.empirical, equal.predicted
        ),
    ))
}

type SamplePair = (Vec<Vec<f64>>, Vec<Vec<f64>>);

/// Terminal samples of the exact Gaussian field under the SDE and ODE samplers.
pub fn marginal_samples(
    case: &AnalyticGaussian,
    schedule: &Schedule,
    n: usize,
) -> Result<SamplePair> {
    let d = case.data_dim();
    let sde: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(0, &[domain::VERIFY, 6, i as u64]);
            let x = rng::standard_normal(&mut r, d);
            sample_sde(case, &x, 0, schedule, |_| true, &mut r)
        })
        .collect::<Result<_>>()?;
    let ode: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(0, &[domain::VERIFY, 7, i as u64]);
            sample_ode(case, &rng::standard_normal(&mut r, d), 0, schedule)
        })
        .collect::<Result<_>>()?;
    Ok((sde, ode))
}

pub fn check_marginal_preservation(n: usize) -> Result<(bool, String)> {
    let case = analytic_gaussian_case(&[1.0, -0.5], 0.5)?;
    // τ_min must stay below 1/T, so the default 0.02 is halved at T = 50.
    let schedule = make_schedule(50, 0.01, 0.7)?;
    let (sde, ode) = marginal_samples(&case, &schedule, n)?;
    let ed = energy_distance(&sde, &ode)?;
    Ok((
        ed < 0.05,
        format!("energy distance {ed:.5} over {n} samples each"),
    ))
}

pub fn check_surrogate_values() -> Result<(bool, String)> {
    let schedule = make_schedule(10, 0.02, 0.7)?;
    let mut r = rng::stream(0, &[domain::VERIFY, 8]);
    let model = VelocityField::new(2, 2, &[8], &mut r);
    let base = |adv: f64, r: &mut crate::rng::Stream| -> Result<EdgeSample> {
        let x = rng::standard_normal(r, 2);
        Ok(EdgeSample {
            transition: sde_step(&model, &x, 3, 0, &schedule, r)?,
            advantage: adv,
        })
    };
    let on_policy: Vec<EdgeSample> = [0.7, -1.2, 0.4]
        .iter()
        .map(|&a| base(a, &mut r))
        .collect::<Result<_>>()?;
    let l1 = grpo_loss(&model, &on_policy, &schedule, 0.2, LossAggregation::Sum)?.loss;
    let want1 = -(0.7 - 1.2 + 0.4);

    let mut hi = base(2.0, &mut r)?;
    hi.transition.logprob -= 1.5f64.ln();
    let l2 = grpo_loss(&model, &[hi], &schedule, 0.2, LossAggregation::Sum)?.loss;
    let mut lo = base(-1.0, &mut r)?;
    lo.transition.logprob -= 0.5f64.ln();
    let l3 = grpo_loss(&model, &[lo], &schedule, 0.2, LossAggregation::Sum)?.loss;

    let passed = (l1 - want1).abs() < 1e-12 && (l2 + 2.4).abs() < 1e-12 && (l3 - 0.8).abs() < 1e-12;
    Ok((passed, format!("losses {l1:.12}, {l2:.12}, {l3:.12}")))
}

pub fn check_nfe_accounting() -> Result<(bool, String)> {
    let schedule = make_schedule(10, 0.02, 0.7)?;
    let model = VelocityField::new(2, 2, &[8], &mut rng::stream(0, &[domain::VERIFY, 9]));
    let tree = build_tree(&model, 0, 1, &schedule, &[4, 5, 6], 3)?;
    let tree_nfe = nfe_count(&tree);
    let oracle = frontier_nfe(10, &[4, 5, 6], 3);
    let traj = trajectory_nfe(27, 10);
    let ratio = tree_nfe as f64 / traj as f64;
    Ok((
        tree_nfe == 98 && oracle == 98 && traj == 270 && ratio < 0.37,
        format!("tree {tree_nfe}, trajectories {traj}, ratio {ratio:.4}"),
    ))
}

/// Run every self-check at full size.
pub fn run_suite() -> Vec<CheckOutcome> {
    vec![
        timed(1, "tree combinatorics", check_tree_combinatorics),
        timed(2, "backup oracle equivalence", || check_backup_oracle(200)),
        timed(3, "window law", || check_window_law(100_000)),
        timed(4, "gradient fidelity", || check_gradients(120)),
        timed(5, "variance reduction", || {
            check_variance_reduction(100_000)
        }),
        timed(6, "marginal preservation", || {
            check_marginal_preservation(10_000)
        }),
        timed(7, "clipped surrogate values", check_surrogate_values),
        timed(8, "nfe accounting", check_nfe_accounting),
    ]
}
