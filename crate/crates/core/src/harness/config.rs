//! Run configuration as a flat `key = value` text file.
//!
//! Keys are dotted (`tree.branch = 3`); lists are comma-separated; `#` starts a
//! comment. Every key can also be set from the command line with a flag of
//! the same name, and the seed can come from `TREEGRPO_SEED`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::advantage::CombineMode;
use crate::error::{Error, Result};
use crate::flow_model::PretrainConfig;
use crate::grpo::{LossAggregation, UpdateConfig};
use crate::optim::AdamWConfig;
use crate::rewards::{RewardModelSpec, RewardSet, Task};
use crate::sampler::{make_schedule, Schedule};
use crate::scheduler::WindowStrategy;

pub const SEED_ENV: &str = "TREEGRPO_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    TreeGrpo,
    TrajectoryGrpo,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::TreeGrpo => "treegrpo",
            Method::TrajectoryGrpo => "trajectory_grpo",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "treegrpo" => Ok(Method::TreeGrpo),
            "trajectory_grpo" => Ok(Method::TrajectoryGrpo),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub method: Method,
    pub seed: u64,
    /// Empty means nothing is written to disk.
    pub output_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub tree_dump_every: usize,

    pub task: String,
    pub hidden: Vec<usize>,
    /// Start from this checkpoint instead of pretraining.
    pub checkpoint: Option<PathBuf>,

    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub pretrain_seed: u64,
    pub pretrain_max_loss: Option<f64>,

    pub schedule_steps: usize,
    pub tau_min: f64,
    pub noise_coeff: f64,

    pub branch: usize,
    pub depth: usize,
    pub trees_per_prompt: usize,

    pub window_strategy: String,
    pub window_r: f64,
    pub window_stride: usize,
    pub window_start: usize,
    pub window_length: usize,

    pub baseline_group: usize,

    pub reward_models: Vec<String>,
    pub reward_weights: Vec<f64>,
    pub combine_mode: CombineMode,
    pub ring_radius: f64,
    pub ema_decay: f64,
    pub reward_max: Vec<f64>,

    pub update: UpdateConfig,

    pub prompt_ids: Vec<usize>,
    pub prompt_batch: usize,
    pub epochs: usize,
    /// Stop before an iteration once cumulative NFE reaches this; 0 disables.
    pub nfe_budget: u64,

    pub eval_samples: usize,
    /// Evaluate every this many iterations (and after the last); 0 = only at the end.
    pub eval_every: usize,
    pub eval_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::TreeGrpo,
            seed: 0,
            output_dir: None,
            checkpoint_every: 0,
            tree_dump_every: 0,
            task: "two_mode".into(),
            hidden: crate::flow_model::DEFAULT_HIDDEN.to_vec(),
            checkpoint: None,
            pretrain_steps: 20_000,
            pretrain_batch: 256,
            pretrain_lr: 2e-3,
            pretrain_seed: 0,
            pretrain_max_loss: Some(DEFAULT_PRETRAIN_MAX_LOSS),
            schedule_steps: 10,
            tau_min: 0.02,
            noise_coeff: 0.7,
            branch: 3,
            depth: 3,
            trees_per_prompt: 1,
            window_strategy: "random".into(),
            window_r: 0.5,
            window_stride: 1,
            window_start: 0,
            window_length: 3,
            baseline_group: 27,
            reward_models: vec!["mode_proximity".into()],
            reward_weights: vec![1.0],
            combine_mode: CombineMode::AdvantageSum,
            ring_radius: 1.5,
            ema_decay: crate::rewards::DEFAULT_EMA_DECAY,
            reward_max: vec![0.0],
            update: UpdateConfig::default(),
            prompt_ids: vec![0, 1],
            prompt_batch: 8,
            epochs: 300,
            nfe_budget: 0,
            eval_samples: 1000,
            eval_every: 0,
            eval_seed: 12_345,
        }
    }
}

/// Held-out flow-matching loss ceiling for the default two-mode pretraining run.
pub const DEFAULT_PRETRAIN_MAX_LOSS: f64 = 2.35;

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn parse_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

impl RunConfig {
    /// Set one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "method" => self.method = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "output.dir" => self.output_dir = parse_path(v),
            "output.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "output.tree_dump_every" => self.tree_dump_every = parse(key, v)?,
            "task.name" => self.task = v.to_string(),
            "model.hidden" => self.hidden = parse_list(key, v)?,
            "model.checkpoint" => self.checkpoint = parse_path(v),
            "pretrain.steps" => self.pretrain_steps = parse(key, v)?,
            "pretrain.batch" => self.pretrain_batch = parse(key, v)?,
            "pretrain.lr" => self.pretrain_lr = parse(key, v)?,
            "pretrain.seed" => self.pretrain_seed = parse(key, v)?,
            "pretrain.max_loss" => {
                self.pretrain_max_loss = if v.is_empty() {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            "schedule.steps" => self.schedule_steps = parse(key, v)?,
            "schedule.tau_min" => self.tau_min = parse(key, v)?,
            "schedule.noise" => self.noise_coeff = parse(key, v)?,
            "tree.branch" => self.branch = parse(key, v)?,
            "tree.depth" => self.depth = parse(key, v)?,
            "tree.trees" => self.trees_per_prompt = parse(key, v)?,
            "window.strategy" => self.window_strategy = v.to_string(),
            "window.r" => self.window_r = parse(key, v)?,
            "window.stride" => self.window_stride = parse(key, v)?,
            "window.start" => self.window_start = parse(key, v)?,
            "window.length" => self.window_length = parse(key, v)?,
            "baseline.group" => self.baseline_group = parse(key, v)?,
            "rewards.models" => self.reward_models = parse_list(key, v)?,
            "rewards.weights" => self.reward_weights = parse_list(key, v)?,
            "rewards.mode" => {
                self.combine_mode = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?
            }
            "rewards.ring_radius" => self.ring_radius = parse(key, v)?,
            "rewards.ema_decay" => self.ema_decay = parse(key, v)?,
            "rewards.r_max" => self.reward_max = parse_list(key, v)?,
            "update.clip" => self.update.clip_eps = parse(key, v)?,
            "update.lr" => self.update.optimizer.lr = parse(key, v)?,
            "update.weight_decay" => self.update.optimizer.weight_decay = parse(key, v)?,
            "update.beta1" => self.update.optimizer.beta1 = parse(key, v)?,
            "update.beta2" => self.update.optimizer.beta2 = parse(key, v)?,
            "update.eps" => self.update.optimizer.eps = parse(key, v)?,
            "update.inner_epochs" => self.update.inner_epochs = parse(key, v)?,
            "update.refresh_every" => self.update.refresh_every = parse(key, v)?,
            "update.micro_batch" => self.update.micro_batch = parse(key, v)?,
            "update.loss" => {
                self.update.aggregation =
                    v.parse().map_err(|e: Error| Error::Config(e.to_string()))?
            }
            "prompts.ids" => self.prompt_ids = parse_list(key, v)?,
            "prompts.batch" => self.prompt_batch = parse(key, v)?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.nfe_budget" => self.nfe_budget = parse(key, v)?,
            "eval.samples" => self.eval_samples = parse(key, v)?,
            "eval.every" => self.eval_every = parse(key, v)?,
            "eval.seed" => self.eval_seed = parse(key, v)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown configuration key '{other}'"
                )))
            }
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let o: &AdamWConfig = &self.update.optimizer;
        vec![
            ("method", self.method.as_str().into()),
            ("seed", self.seed.to_string()),
            ("output.dir", show_path(&self.output_dir)),
            ("output.checkpoint_every", self.checkpoint_every.to_string()),
            ("output.tree_dump_every", self.tree_dump_every.to_string()),
            ("task.name", self.task.clone()),
            ("model.hidden", join(&self.hidden)),
            ("model.checkpoint", show_path(&self.checkpoint)),
            ("pretrain.steps", self.pretrain_steps.to_string()),
            ("pretrain.batch", self.pretrain_batch.to_string()),
            ("pretrain.lr", self.pretrain_lr.to_string()),
            ("pretrain.seed", self.pretrain_seed.to_string()),
            (
                "pretrain.max_loss",
                self.pretrain_max_loss
                    .map(|v| v.to_string())
                    .unwrap_or_default(),
            ),
            ("schedule.steps", self.schedule_steps.to_string()),
            ("schedule.tau_min", self.tau_min.to_string()),
            ("schedule.noise", self.noise_coeff.to_string()),
            ("tree.branch", self.branch.to_string()),
            ("tree.depth", self.depth.to_string()),
            ("tree.trees", self.trees_per_prompt.to_string()),
            ("window.strategy", self.window_strategy.clone()),
            ("window.r", self.window_r.to_string()),
            ("window.stride", self.window_stride.to_string()),
            ("window.start", self.window_start.to_string()),
            ("window.length", self.window_length.to_string()),
            ("baseline.group", self.baseline_group.to_string()),
            ("rewards.models", self.reward_models.join(",")),
            ("rewards.weights", join(&self.reward_weights)),
            ("rewards.mode", self.combine_mode.as_str().into()),
            ("rewards.ring_radius", self.ring_radius.to_string()),
            ("rewards.ema_decay", self.ema_decay.to_string()),
            ("rewards.r_max", join(&self.reward_max)),
            ("update.clip", self.update.clip_eps.to_string()),
            ("update.lr", o.lr.to_string()),
            ("update.weight_decay", o.weight_decay.to_string()),
            ("update.beta1", o.beta1.to_string()),
            ("update.beta2", o.beta2.to_string()),
            ("update.eps", o.eps.to_string()),
            ("update.inner_epochs", self.update.inner_epochs.to_string()),
            (
                "update.refresh_every",
                self.update.refresh_every.to_string(),
            ),
            ("update.micro_batch", self.update.micro_batch.to_string()),
            (
                "update.loss",
                match self.update.aggregation {
                    LossAggregation::Sum => "sum".into(),
                    LossAggregation::Mean => "mean".into(),
                },
            ),
            ("prompts.ids", join(&self.prompt_ids)),
            ("prompts.batch", self.prompt_batch.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.nfe_budget", self.nfe_budget.to_string()),
            ("eval.samples", self.eval_samples.to_string()),
            ("eval.every", self.eval_every.to_string()),
            ("eval.seed", self.eval_seed.to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        Self::default()
            .to_pairs()
            .into_iter()
            .map(|(k, _)| k)
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Apply `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::default();
        config.apply_text(&text)?;
        Ok(config)
    }

    /// Take the seed from [`SEED_ENV`] if it is set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = parse(SEED_ENV, &v)?;
        }
        Ok(())
    }

    pub fn task(&self) -> Result<Task> {
        Task::by_name(&self.task)
    }

    pub fn schedule(&self) -> Result<Schedule> {
        make_schedule(self.schedule_steps, self.tau_min, self.noise_coeff)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn window(&self) -> Result<WindowStrategy> {
        match self.window_strategy.as_str() {
            "random" => Ok(WindowStrategy::Random { r: self.window_r }),
            "shifting" => Ok(WindowStrategy::Shifting {
                stride: self.window_stride,
            }),
            "fixed" => Ok(WindowStrategy::Fixed {
                start: self.window_start,
            }),
            other => Err(Error::Config(format!("unknown window strategy '{other}'"))),
        }
    }

    pub fn rewards(&self) -> Result<RewardSet> {
        let task = self.task()?;
        if self.reward_models.len() != self.reward_weights.len() {
            return Err(Error::Config(format!(
                "{} reward models but {} weights",
                self.reward_models.len(),
                self.reward_weights.len()
            )));
        }
        let specs = self
            .reward_models
            .iter()
            .zip(&self.reward_weights)
            .map(|(name, &w)| RewardModelSpec::registered(name, &task, w, self.ring_radius))
            .collect::<Result<Vec<_>>>()?;
        RewardSet::new(specs).map_err(|e| Error::Config(e.to_string()))
    }

    /// Per-model `r_max`, broadcasting a single value.
    pub fn reward_max(&self) -> Result<Vec<f64>> {
        match self.reward_max.len() {
            1 => Ok(vec![self.reward_max[0]; self.reward_models.len()]),
            n if n == self.reward_models.len() => Ok(self.reward_max.clone()),
            n => Err(Error::Config(format!(
                "{n} r_max values for {} reward models",
                self.reward_models.len()
            ))),
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let mut c = PretrainConfig {
            steps: self.pretrain_steps,
            batch_size: self.pretrain_batch,
            seed: self.pretrain_seed,
            max_held_out_loss: self.pretrain_max_loss,
            ..Default::default()
        };
        c.optimizer.lr = self.pretrain_lr;
        c
    }

    /// Check everything that can be checked before any compute.
    pub fn validate(&self) -> Result<()> {
        let task = self.task()?;
        let schedule = self.schedule()?;
        self.rewards()?;
        self.reward_max()?;
        self.update.validate()?;
        self.window()?;
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(format!(
                "model.hidden {:?} must be non-empty and positive",
                self.hidden
            )));
        }
        if self.window_length != self.depth {
            return Err(Error::Config(format!(
                "window.length {} must equal tree.depth {}",
                self.window_length, self.depth
            )));
        }
        if self.depth < 1 || self.depth + 1 > schedule.steps() {
            return Err(Error::Config(format!(
                "tree.depth {} must lie in [1, T−1] for T = {}",
                self.depth,
                schedule.steps()
            )));
        }
        if self.branch < 2 || self.trees_per_prompt < 1 {
            return Err(Error::Config(
                "tree.branch must be >= 2 and tree.trees >= 1".into(),
            ));
        }
        if self.baseline_group < 2 {
            return Err(Error::Config("baseline.group must be at least 2".into()));
        }
        if self.prompt_ids.is_empty() || self.prompt_batch == 0 {
            return Err(Error::Config(
                "prompts.ids and prompts.batch must be non-empty".into(),
            ));
        }
        if let Some(&c) = self
            .prompt_ids
            .iter()
            .find(|&&c| c >= task.num_conditions())
        {
            return Err(Error::Config(format!(
                "prompt {c} out of range for task '{}' with {} conditions",
                task.name(),
                task.num_conditions()
            )));
        }
        if self.eval_samples == 0 {
            return Err(Error::Config("eval.samples must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "rewards.ema_decay {} outside [0, 1]",
                self.ema_decay
            )));
        }
        if self.checkpoint.is_none() && self.pretrain_batch == 0 {
            return Err(Error::Config(
                "pretraining needs a positive batch size".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text(
            "tree.branch = 4\n# comment\n\nupdate.lr=0.001  # inline\nprompts.ids = 1, 0\n",
        )
        .unwrap();
        assert_eq!(c.branch, 4);
        assert_eq!(c.update.optimizer.lr, 1e-3);
        assert_eq!(c.prompt_ids, vec![1, 0]);
        let mut d = RunConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn every_listed_key_is_settable() {
        let c = RunConfig::default();
        let mut d = RunConfig::default();
        for (k, v) in c.to_pairs() {
            d.set(k, &v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
        assert_eq!(c, d);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set("tree.breadth", "3").is_err());
        assert!(c.set("tree.branch", "three").is_err());
        assert!(c.apply_text("tree.branch 3").is_err());
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        let mut c = RunConfig::default();
        c.window_length = 2;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.reward_models = vec!["hps".into()];
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.prompt_ids = vec![2];
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.reward_weights = vec![0.5];
        assert!(c.validate().is_err());
    }
}
