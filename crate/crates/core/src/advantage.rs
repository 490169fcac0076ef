//! Leaf advantages and their propagation towards the root.
//!
//! Each internal edge receives the softmax(behavior log-prob)-weighted mean of
//! its child edges' advantages. Single-child (ODE) edges pass advantages
//! through unchanged.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rewards::{RewardStats, STD_FLOOR};
use crate::tree::DenoiseTree;

/// Population z-scores within one prompt group. A constant group maps to
/// all zeros.
pub fn leaf_advantages(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "group of size {} carries no relative signal",
            scores.len()
        )));
    }
    if scores.iter().all(|&s| s == scores[0]) {
        return Ok(vec![0.0; scores.len()]);
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    Ok(scores.iter().map(|s| (s - mean) / std).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    /// Normalize each reward within the group, then take `Σ w_k·A_k`.
    #[default]
    AdvantageSum,
    /// Weighted sum of raw scores, normalized once.
    RewardSum,
    /// Standardize each reward by its running statistics, take the weighted
    /// sum, then normalize within the group.
    StandardizedSum,
}

impl FromStr for CombineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "advantage_sum" => Ok(Self::AdvantageSum),
            "reward_sum" => Ok(Self::RewardSum),
            "standardized_sum" => Ok(Self::StandardizedSum),
            other => Err(Error::InvalidArgument(format!(
                "unknown reward combination mode '{other}'"
            ))),
        }
    }
}

impl CombineMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::AdvantageSum => "advantage_sum",
            Self::RewardSum => "reward_sum",
            Self::StandardizedSum => "standardized_sum",
        }
    }
}

fn check_weights(weights: &[f64], models: usize) -> Result<()> {
    if weights.len() != models {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {models} reward models",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "weights {weights:?} must be nonnegative and sum to 1"
        )));
    }
    Ok(())
}

/// `Σ_k w_k·A_k` per leaf; `per_model[k][leaf]`.
pub fn weighted_advantage_sum(per_model: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    check_weights(weights, per_model.len())?;
    let n = per_model.first().map_or(0, Vec::len);
    if per_model.iter().any(|a| a.len() != n) {
        return Err(Error::InvalidArgument(
            "per-model advantage vectors differ in length".into(),
        ));
    }
    Ok((0..n)
        .map(|i| per_model.iter().zip(weights).map(|(a, w)| w * a[i]).sum())
        .collect())
}

/// Final leaf advantages of one group from raw per-model scores `raw[k][leaf]`.
pub fn combine_multi_reward(
    raw: &[Vec<f64>],
    weights: &[f64],
    mode: CombineMode,
    stats: Option<&RewardStats>,
) -> Result<Vec<f64>> {
    check_weights(weights, raw.len())?;
    match mode {
        CombineMode::AdvantageSum => {
            let per_model = raw
                .iter()
                .map(|s| leaf_advantages(s))
                .collect::<Result<Vec<_>>>()?;
            weighted_advantage_sum(&per_model, weights)
        }
        CombineMode::RewardSum => {
            let n = raw.first().map_or(0, Vec::len);
            let aggregated: Vec<f64> = (0..n)
                .map(|i| raw.iter().zip(weights).map(|(s, w)| w * s[i]).sum())
                .collect();
            leaf_advantages(&aggregated)
        }
        CombineMode::StandardizedSum => {
            let stats = stats.ok_or_else(|| {
                Error::Precondition(
                    "standardized_sum mode requires running reward statistics".into(),
                )
            })?;
            let n = raw.first().map_or(0, Vec::len);
            let aggregated: Vec<f64> = (0..n)
                .map(|i| {
                    raw.iter()
                        .zip(weights)
                        .enumerate()
                        .map(|(k, (s, w))| w * stats.standardize(k, s[i]))
                        .sum()
                })
                .collect();
            leaf_advantages(&aggregated)
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `1 / Σ w_k²`.
pub fn effective_sample_size(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::InvalidArgument(
            "effective sample size of no weights".into(),
        ));
    }
    Ok(1.0 / weights.iter().map(|w| w * w).sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct BackupReport {
    /// Nodes with more than one child.
    pub branching_nodes: usize,
    /// Mean ESS of the softmax weights over branching nodes.
    pub mean_ess: f64,
    /// Weighted advantage at the root node.
    pub root_advantage: f64,
}

/// Post-order pass that fills every internal edge advantage.
///
/// Requires every leaf edge advantage to be set and every other edge to be
/// unset. Node ids increase with depth, so reverse id order visits children
/// before parents.
pub fn backup(tree: &mut DenoiseTree) -> Result<BackupReport> {
    let mut report = BackupReport::default();
    let mut ess_total = 0.0;
    for u in (0..tree.nodes.len()).rev() {
        let children = &tree.nodes[u].children;
        if children.is_empty() {
            continue;
        }
        let mut child_adv = Vec::with_capacity(children.len());
        for &e in children {
            child_adv.push(tree.edges[e].advantage.ok_or_else(|| {
                Error::Precondition(format!("edge {e} has no advantage; leaf advantages unset?"))
            })?);
        }
        let value = if children.len() == 1 {
            child_adv[0]
        } else {
            let logits: Vec<f64> = children
                .iter()
                .map(|&e| tree.edges[e].behavior_logprob())
                .collect();
            let w = softmax(&logits);
            report.branching_nodes += 1;
            ess_total += effective_sample_size(&w)?;
            w.iter().zip(&child_adv).map(|(w, a)| w * a).sum()
        };
        match tree.nodes[u].parent_edge {
            Some(e) => {
                if tree.edges[e].advantage.is_some() {
                    return Err(Error::Precondition(format!("edge {e} advantage set twice")));
                }
                tree.edges[e].advantage = Some(value);
            }
            None => report.root_advantage = value,
        }
    }
    if report.branching_nodes > 0 {
        report.mean_ess = ess_total / report.branching_nodes as f64;
    }
    Ok(report)
}
