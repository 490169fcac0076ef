//! The outer training loop and evaluation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::config::{Method, RunConfig};
use super::runlog::{IterationRecord, RunLog};
use crate::advantage::{backup, combine_multi_reward, BackupReport};
use crate::baseline::{collect_trajectories, TrajectoryBatch};
use crate::error::{Error, Result};
use crate::flow_model::{pretrain, VelocityField, VelocityModel};
use crate::grpo::{EdgeBatch, PolicyState, UpdateMetrics};
use crate::rewards::{RewardSet, RewardStats};
use crate::rng::{self, derive_seed, domain};
use crate::sampler::{sample_ode_batch, Schedule};
use crate::scheduler::plan_window;
use crate::tree::{build_tree, nfe_count, DenoiseTree};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub reward_names: Vec<String>,
    /// Mean raw reward per model over all (prompt, sample) pairs.
    pub means: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// `(condition, per-model means)` for each distinct prompt.
    pub per_condition: Vec<(usize, Vec<f64>)>,
    pub samples_per_prompt: usize,
}

/// Score deterministic ODE samples. Sample `i` of condition `c` starts from
/// the stream `(seed, EVAL, c, i)`, so the result does not depend on the
/// order or multiplicity of `prompts`.
pub fn evaluate(
    model: &impl VelocityModel,
    rewards: &RewardSet,
    prompts: &[usize],
    samples: usize,
    schedule: &Schedule,
    seed: u64,
) -> Result<EvalReport> {
    if samples == 0 {
        return Err(Error::InvalidArgument(
            "evaluation needs at least one sample per prompt".into(),
        ));
    }
    let mut conditions = prompts.to_vec();
    conditions.sort_unstable();
    conditions.dedup();
    if conditions.is_empty() {
        return Err(Error::InvalidArgument(
            "evaluation needs at least one prompt".into(),
        ));
    }
    let d = model.data_dim();
    let scores: Vec<Vec<Vec<f64>>> = conditions
        .par_iter()
        .map(|&c| {
            let xs: Vec<f64> = (0..samples)
                .flat_map(|i| {
                    rng::standard_normal(
                        &mut rng::stream(seed, &[domain::EVAL, c as u64, i as u64]),
                        d,
                    )
                })
                .collect();
            let out = sample_ode_batch(model, &xs, &vec![c; samples], schedule)?;
            let terminals: Vec<Vec<f64>> = out.chunks_exact(d).map(<[f64]>::to_vec).collect();
            rewards.evaluate_many(&terminals, c)
        })
        .collect::<Result<_>>()?;
    let n = (samples * conditions.len()) as f64;
    let mut means = vec![0.0; rewards.len()];
    let mut std_errors = vec![0.0; rewards.len()];
    for k in 0..rewards.len() {
        let all = scores.iter().flat_map(|s| s[k].iter());
        let mean = all.clone().sum::<f64>() / n;
        let var = all.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        means[k] = mean;
        std_errors[k] = (var / n).sqrt();
    }
    let per_condition = conditions
        .iter()
        .zip(&scores)
        .map(|(&c, s)| {
            (
                c,
                s.iter()
                    .map(|v| v.iter().sum::<f64>() / samples as f64)
                    .collect(),
            )
        })
        .collect();
    Ok(EvalReport {
        reward_names: rewards.names(),
        means,
        std_errors,
        per_condition,
        samples_per_prompt: samples,
    })
}

/// Load the configured checkpoint or pretrain a fresh model.
pub fn initial_model(config: &RunConfig) -> Result<VelocityField> {
    let task = config.task()?;
    if let Some(path) = &config.checkpoint {
        let model = VelocityField::load(path)?;
        if model.data_dim() != task.data_dim() || model.num_conditions() != task.num_conditions() {
            return Err(Error::Checkpoint(format!(
                "checkpoint {} does not match task '{}'",
                path.display(),
                task.name()
            )));
        }
        return Ok(model);
    }
    let init = VelocityField::new(
        task.data_dim(),
        task.num_conditions(),
        &config.hidden,
        &mut rng::stream(config.pretrain_seed, &[domain::INIT]),
    );
    let report = pretrain(init, &task, &config.pretrain_config())?;
    log::info!(
        "pretrained: held-out flow-matching loss {:.5}",
        report.held_out_loss
    );
    Ok(report.model)
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub method: String,
    pub task: String,
    pub seed: u64,
    pub iterations: usize,
    pub cumulative_nfe: u64,
    pub reward_names: Vec<String>,
    pub initial_eval: Vec<f64>,
    pub final_eval: Vec<f64>,
    pub final_eval_std_errors: Vec<f64>,
    pub wall_seconds: f64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub model: VelocityField,
    pub log: RunLog,
    pub summary: RunSummary,
}

fn prompt_batch(config: &RunConfig, iteration: usize) -> Vec<usize> {
    let ids = &config.prompt_ids;
    (0..config.prompt_batch)
        .map(|j| ids[(iteration * config.prompt_batch + j) % ids.len()])
        .collect()
}

/// Raw rewards of every group, `raw[group][model][member]`.
fn score_groups(
    rewards: &RewardSet,
    groups: &[(usize, Vec<Vec<f64>>)],
) -> Result<Vec<Vec<Vec<f64>>>> {
    groups
        .par_iter()
        .map(|(c, terminals)| rewards.evaluate_many(terminals, *c))
        .collect()
}

/// Update the running statistics with a whole iteration, then turn each
/// group's raw scores into advantages.
fn group_advantages(
    config: &RunConfig,
    rewards: &RewardSet,
    stats: &mut RewardStats,
    raw: &[Vec<Vec<f64>>],
) -> Result<Vec<Vec<f64>>> {
    let pooled: Vec<Vec<f64>> = (0..rewards.len())
        .map(|k| raw.iter().flat_map(|g| g[k].iter().copied()).collect())
        .collect();
    stats.update(&pooled)?;
    let weights = rewards.weights();
    raw.iter()
        .map(|g| combine_multi_reward(g, &weights, config.combine_mode, Some(stats)))
        .collect()
}

struct Collected {
    edges: EdgeBatch,
    raw: Vec<Vec<Vec<f64>>>,
    nfe: u64,
    window_start: Option<usize>,
    backups: Vec<BackupReport>,
    trees: Vec<DenoiseTree>,
}

fn collect_trees(
    config: &RunConfig,
    behavior: &VelocityField,
    schedule: &Schedule,
    rewards: &RewardSet,
    stats: &mut RewardStats,
    iteration: usize,
) -> Result<Collected> {
    let plan = plan_window(
        config.window()?,
        iteration,
        schedule.steps(),
        config.window_length,
        &mut rng::stream(config.seed, &[domain::WINDOW, iteration as u64]),
    )?;
    let window = plan.steps();
    let prompts = prompt_batch(config, iteration);
    let mut groups: Vec<Vec<DenoiseTree>> = prompts
        .par_iter()
        .enumerate()
        .map(|(j, &c)| {
            (0..config.trees_per_prompt)
                .map(|t| {
                    let seed = derive_seed(
                        config.seed,
                        &[domain::TREE, iteration as u64, j as u64, t as u64],
                    );
                    build_tree(behavior, c, seed, schedule, &window, config.branch)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let terminals: Vec<(usize, Vec<Vec<f64>>)> = groups
        .iter()
        .zip(&prompts)
        .map(|(g, &c)| (c, g.iter().flat_map(DenoiseTree::leaf_latents).collect()))
        .collect();
    let raw = score_groups(rewards, &terminals)?;
    let advantages = group_advantages(config, rewards, stats, &raw)?;
    let mut backups = Vec::new();
    for (trees, adv) in groups.iter_mut().zip(&advantages) {
        let mut offset = 0;
        for tree in trees.iter_mut() {
            let n = tree.leaves.len();
            tree.set_leaf_advantages(&adv[offset..offset + n])?;
            offset += n;
            backups.push(backup(tree)?);
        }
    }
    let trees: Vec<DenoiseTree> = groups.into_iter().flatten().collect();
    Ok(Collected {
        edges: EdgeBatch::from_trees(&trees)?,
        raw,
        nfe: trees.iter().map(|t| nfe_count(t) as u64).sum(),
        window_start: Some(plan.start),
        backups,
        trees,
    })
}

fn collect_baseline(
    config: &RunConfig,
    behavior: &VelocityField,
    schedule: &Schedule,
    rewards: &RewardSet,
    stats: &mut RewardStats,
    iteration: usize,
) -> Result<Collected> {
    let prompts = prompt_batch(config, iteration);
    let mut batches: Vec<TrajectoryBatch> = prompts
        .par_iter()
        .enumerate()
        .map(|(j, &c)| {
            let seed = derive_seed(
                config.seed,
                &[domain::TRAJECTORY, iteration as u64, j as u64],
            );
            collect_trajectories(behavior, c, config.baseline_group, schedule, seed)
        })
        .collect::<Result<_>>()?;
    let terminals: Vec<(usize, Vec<Vec<f64>>)> = batches
        .iter()
        .map(|b| (b.condition, b.terminals()))
        .collect();
    let raw = score_groups(rewards, &terminals)?;
    let advantages = group_advantages(config, rewards, stats, &raw)?;
    let mut edges = EdgeBatch::default();
    for (b, adv) in batches.iter_mut().zip(advantages) {
        b.set_advantages(adv)?;
        edges.extend(b.edge_batch()?);
    }
    Ok(Collected {
        edges,
        raw,
        nfe: batches.iter().map(|b| b.nfe() as u64).sum(),
        window_start: None,
        backups: Vec::new(),
        trees: Vec::new(),
    })
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count().max(1) as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn write_outputs(dir: &Path, log: &RunLog, summary: &RunSummary) -> Result<()> {
    log.write_csv(dir.join("runlog.csv"))?;
    log.write_json(dir.join("runlog.json"))?;
    let path = dir.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(summary)?).map_err(|e| Error::io(&path, e))
}

/// Run the configured number of iterations starting from `model`.
///
/// Each iteration collects a prompt batch with the behavior snapshot, assigns
/// advantages, performs one policy update and refreshes the snapshot on its
/// cadence. With an output directory the log, summary and checkpoints are
/// written there.
pub fn run_training_from(config: &RunConfig, model: VelocityField) -> Result<RunArtifacts> {
    config.validate()?;
    let start = Instant::now();
    let task = config.task()?;
    let schedule = config.schedule()?;
    let rewards = config.rewards()?;
    if model.data_dim() != task.data_dim() || model.num_conditions() != task.num_conditions() {
        return Err(Error::Config(format!(
            "model does not match task '{}'",
            task.name()
        )));
    }
    if let Some(dir) = &config.output_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.txt");
        std::fs::write(&path, config.to_text()).map_err(|e| Error::io(&path, e))?;
    }
    let eval = |m: &VelocityField| {
        evaluate(
            m,
            &rewards,
            &config.prompt_ids,
            config.eval_samples,
            &schedule,
            config.eval_seed,
        )
    };
    let initial = eval(&model)?;
    let mut log = RunLog::new(
        config.method.as_str(),
        task.name(),
        config.seed,
        rewards.names(),
        initial.means.clone(),
        config.reward_max()?,
    );
    let mut state = PolicyState::new(model, config.update.clone())?;
    let mut stats = RewardStats::new(rewards.len(), config.ema_decay)?;
    let mut cumulative_nfe = 0u64;
    let mut last_eval = initial.clone();

    for iteration in 0..config.epochs {
        if config.nfe_budget > 0 && cumulative_nfe >= config.nfe_budget {
            log::info!(
                "NFE budget {} reached after {iteration} iterations",
                config.nfe_budget
            );
            break;
        }
        let wrap = |e: Error| Error::Iteration {
            iteration,
            source: Box::new(e),
        };
        let t0 = Instant::now();
        let collected = match config.method {
            Method::TreeGrpo => collect_trees(
                config,
                &state.behavior,
                &schedule,
                &rewards,
                &mut stats,
                iteration,
            ),
            Method::TrajectoryGrpo => collect_baseline(
                config,
                &state.behavior,
                &schedule,
                &rewards,
                &mut stats,
                iteration,
            ),
        }
        .map_err(wrap)?;
        let sample_seconds = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let metrics: UpdateMetrics = state.update(&collected.edges, &schedule).map_err(wrap)?;
        let update_seconds = t1.elapsed().as_secs_f64();
        cumulative_nfe += collected.nfe;

        let last = iteration + 1 == config.epochs
            || (config.nfe_budget > 0 && cumulative_nfe >= config.nfe_budget);
        let eval_now = last || (config.eval_every > 0 && (iteration + 1) % config.eval_every == 0);
        let eval_means = if eval_now {
            last_eval = eval(&state.policy).map_err(wrap)?;
            Some(last_eval.means.clone())
        } else {
            None
        };

        let k_models = rewards.len();
        let per_model = |k: usize| collected.raw.iter().flat_map(move |g| g[k].iter().copied());
        let reward_mean: Vec<f64> = (0..k_models).map(|k| mean_std(per_model(k)).0).collect();
        let reward_max: Vec<f64> = (0..k_models)
            .map(|k| per_model(k).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let reward_standardized_mean: Vec<f64> = (0..k_models)
            .map(|k| mean_std(per_model(k).map(|r| stats.standardize(k, r))).0)
            .collect();
        let (adv_mean, adv_std) = mean_std(collected.edges.entries().iter().map(|e| e.advantage));
        let mean_ess = (!collected.backups.is_empty()).then(|| {
            collected.backups.iter().map(|b| b.mean_ess).sum::<f64>()
                / collected.backups.len() as f64
        });

        log.push(IterationRecord {
            iteration,
            window_start: collected.window_start,
            prompts: config.prompt_batch,
            edges: collected.edges.len(),
            nfe: collected.nfe,
            cumulative_nfe,
            reward_mean,
            reward_max,
            reward_standardized_mean,
            edge_advantage_mean: adv_mean,
            edge_advantage_std: adv_std,
            mean_ess,
            loss: metrics.loss,
            clip_fraction: metrics.clip_fraction,
            grad_norm: metrics.grad_norm,
            steps_skipped: metrics.steps_skipped,
            eval: eval_means,
            sample_seconds,
            update_seconds,
            wall_seconds: start.elapsed().as_secs_f64(),
        })?;
        let rec = log.records.last().expect("just pushed");
        log::info!(
            "iter {iteration:4} nfe {cumulative_nfe:8} reward {:?} loss {:.4} clip {:.3}",
            rec.reward_mean,
            rec.loss,
            rec.clip_fraction
        );

        if let Some(dir) = &config.output_dir {
            if config.checkpoint_every > 0 && (iteration + 1) % config.checkpoint_every == 0 {
                state
                    .policy
                    .save(
                        dir.join("checkpoints")
                            .join(format!("iter_{:05}.bin", iteration + 1)),
                    )
                    .map_err(wrap)?;
            }
            if config.tree_dump_every > 0 && iteration % config.tree_dump_every == 0 {
                let tree_dir = dir.join("trees");
                std::fs::create_dir_all(&tree_dir).map_err(|e| wrap(Error::io(&tree_dir, e)))?;
                for (i, tree) in collected.trees.iter().enumerate() {
                    tree.write_json(tree_dir.join(format!("iter_{iteration:05}_tree_{i:03}.json")))
                        .map_err(wrap)?;
                }
            }
        }
    }

    let checkpoint = config.output_dir.as_ref().map(|d| d.join("final.bin"));
    if let Some(path) = &checkpoint {
        state.policy.save(path)?;
    }
    let summary = RunSummary {
        schema_version: log.schema_version,
        method: log.method.clone(),
        task: log.task.clone(),
        seed: config.seed,
        iterations: log.records.len(),
        cumulative_nfe,
        reward_names: rewards.names(),
        initial_eval: initial.means,
        final_eval: last_eval.means,
        final_eval_std_errors: last_eval.std_errors,
        wall_seconds: start.elapsed().as_secs_f64(),
        checkpoint,
    };
    if let Some(dir) = &config.output_dir {
        write_outputs(dir, &log, &summary)?;
    }
    Ok(RunArtifacts {
        model: state.policy,
        log,
        summary,
    })
}

/// [`run_training_from`] starting at the configured checkpoint, or at a
/// freshly pretrained model which is saved as `pretrained.bin`.
pub fn run_training(config: &RunConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let model = initial_model(config)?;
    if config.checkpoint.is_none() {
        if let Some(dir) = &config.output_dir {
            model.save(dir.join("pretrained.bin"))?;
        }
    }
    run_training_from(config, model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.hidden = vec![8];
        c.epochs = 3;
        c.prompt_batch = 2;
        c.eval_samples = 16;
        c.schedule_steps = 6;
        c.depth = 2;
        c.window_length = 2;
        c.baseline_group = 4;
        c
    }

    fn model() -> VelocityField {
        VelocityField::new(2, 2, &[8], &mut rng::stream(1, &[]))
    }

    #[test]
    fn zero_epochs_copy_the_model() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small_config();
        c.epochs = 0;
        c.output_dir = Some(dir.path().to_path_buf());
        let out = run_training_from(&c, model()).unwrap();
        assert!(out.log.records.is_empty());
        assert_eq!(out.model, model());
        assert_eq!(
            VelocityField::load(dir.path().join("final.bin")).unwrap(),
            model()
        );
        assert!(dir.path().join("runlog.csv").exists());
        assert!(dir.path().join("summary.json").exists());
    }

    #[test]
    fn nfe_accounting_in_logs() {
        let c = small_config();
        let out = run_training_from(&c, model()).unwrap();
        let total: u64 = out.log.records.iter().map(|r| r.nfe).sum();
        assert_eq!(total, out.log.cumulative_nfe());
        let mut b = small_config();
        b.method = Method::TrajectoryGrpo;
        let out = run_training_from(&b, model()).unwrap();
        for r in &out.log.records {
            assert_eq!(
                r.nfe,
                (b.prompt_batch * b.baseline_group * b.schedule_steps) as u64
            );
        }
    }

    #[test]
    fn nfe_budget_stops_early() {
        let mut c = small_config();
        c.method = Method::TrajectoryGrpo;
        c.epochs = 10;
        c.nfe_budget = 100;
        let out = run_training_from(&c, model()).unwrap();
        // Each iteration costs 2·4·6 = 48 evaluations.
        assert_eq!(out.log.records.len(), 3);
        assert!(out.log.records.last().unwrap().eval.is_some());
    }

    #[test]
    fn evaluation_contract() {
        let c = small_config();
        let rewards = c.rewards().unwrap();
        let s = c.schedule().unwrap();
        let m = model();
        assert!(evaluate(&m, &rewards, &[0, 1], 0, &s, 1).is_err());
        let a = evaluate(&m, &rewards, &[0, 1], 32, &s, 1).unwrap();
        let b = evaluate(&m, &rewards, &[1, 0, 1], 32, &s, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn iteration_errors_carry_context() {
        let mut c = small_config();
        c.update.optimizer.lr = 1e6;
        c.epochs = 50;
        // Whatever happens, a failure must name its iteration.
        if let Err(e) = run_training_from(&c, model()) {
            assert!(matches!(e, Error::Iteration { .. }), "{e}");
        }
    }
}
