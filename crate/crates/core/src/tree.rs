//! Sparse denoising search tree.
//!
//! Outside the branching window every frontier node gets a single ODE child;
//! inside it every frontier node gets `b` SDE children that share one proposal
//! mean. Leaves therefore share all latents up to the first window step and
//! differ only through the window draws.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow_model::VelocityModel;
use crate::rng::{self, domain};
use crate::sampler::{Proposal, Schedule, Transition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    /// Deterministic ODE step; the only child of its parent.
    Continuation,
    /// Stochastic SDE step; one of `b` siblings.
    Branching,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeNode {
    pub id: usize,
    pub step: usize,
    pub latent: Vec<f64>,
    pub parent_edge: Option<usize>,
    pub children: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeEdge {
    pub id: usize,
    pub parent: usize,
    pub child: usize,
    pub kind: EdgeKind,
    /// For continuation edges the record has `std = 0` and `logprob = 0`.
    pub transition: Transition,
    pub advantage: Option<f64>,
}

impl TreeEdge {
    pub fn behavior_logprob(&self) -> f64 {
        self.transition.logprob
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DenoiseTree {
    pub condition: usize,
    pub seed: u64,
    #[serde(skip)]
    pub schedule: Schedule,
    pub window: Vec<usize>,
    pub branch: usize,
    pub nodes: Vec<TreeNode>,
    pub edges: Vec<TreeEdge>,
    pub leaves: Vec<usize>,
    nfe: usize,
}

fn validate_window(schedule: &Schedule, window: &[usize], branch: usize) -> Result<()> {
    let t = schedule.steps();
    if window.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "window {window:?} must be sorted and distinct"
        )));
    }
    if let Some(&k) = window.iter().find(|&&k| k >= t) {
        return Err(Error::Config(format!(
            "window step {k} outside horizon {t}"
        )));
    }
    if !window.is_empty() && branch < 2 {
        return Err(Error::Config(format!(
            "branch factor {branch} must be at least 2"
        )));
    }
    if let Some(&k) = window.iter().find(|&&k| schedule.sigma(k) <= 0.0) {
        return Err(Error::Config(format!(
            "window step {k} has zero noise scale and cannot branch"
        )));
    }
    Ok(())
}

/// Grow a tree for one prompt from the root latent drawn from `seed`.
///
/// Child `j` of node `u` draws its noise from the stream
/// `(seed, TREE, u, j)`, so rebuilding with the same inputs reproduces every
/// latent and log-probability exactly.
pub fn build_tree(
    model: &impl VelocityModel,
    condition: usize,
    seed: u64,
    schedule: &Schedule,
    window: &[usize],
    branch: usize,
) -> Result<DenoiseTree> {
    validate_window(schedule, window, branch)?;
    let d = model.data_dim();
    let root_latent = rng::standard_normal(&mut rng::stream(seed, &[domain::TREE, u64::MAX]), d);
    let mut nodes = vec![TreeNode {
        id: 0,
        step: 0,
        latent: root_latent,
        parent_edge: None,
        children: Vec::new(),
    }];
    let mut edges: Vec<TreeEdge> = Vec::new();
    let mut frontier = vec![0usize];
    let mut nfe = 0;

    for k in 0..schedule.steps() {
        let tau = schedule.tau(k);
        let xs: Vec<f64> = frontier
            .iter()
            .flat_map(|&u| nodes[u].latent.iter().copied())
            .collect();
        let velocities = model.velocity_batch(
            &xs,
            &vec![tau; frontier.len()],
            &vec![condition; frontier.len()],
        );
        nfe += frontier.len();
        let branching = window.binary_search(&k).is_ok();
        let mut next = Vec::with_capacity(if branching {
            frontier.len() * branch
        } else {
            frontier.len()
        });

        for (&u, v) in frontier.iter().zip(velocities.chunks_exact(d)) {
            let x = nodes[u].latent.clone();
            let mut attach = |transition: Transition, kind: EdgeKind, nodes: &mut Vec<TreeNode>| {
                let child = nodes.len();
                let edge = edges.len();
                nodes.push(TreeNode {
                    id: child,
                    step: k + 1,
                    latent: transition.action.clone(),
                    parent_edge: Some(edge),
                    children: Vec::new(),
                });
                nodes[u].children.push(edge);
                edges.push(TreeEdge {
                    id: edge,
                    parent: u,
                    child,
                    kind,
                    transition,
                    advantage: None,
                });
                child
            };
            if branching {
                let mean = schedule.proposal_mean(&x, v, k);
                let proposal = Proposal {
                    source: x,
                    step: k,
                    condition,
                    mean,
                    std: schedule.step_std(k),
                };
                for j in 0..branch {
                    let mut r = rng::stream(seed, &[domain::TREE, u as u64, j as u64]);
                    let t = proposal.sample(&mut r);
                    next.push(attach(t, EdgeKind::Branching, &mut nodes));
                }
            } else {
                let delta = schedule.delta(k);
                let action: Vec<f64> = x.iter().zip(v).map(|(x, v)| x - v * delta).collect();
                let t = Transition {
                    source: x,
                    mean: action.clone(),
                    action,
                    step: k,
                    condition,
                    std: 0.0,
                    logprob: 0.0,
                };
                next.push(attach(t, EdgeKind::Continuation, &mut nodes));
            }
        }
        frontier = next;
    }

    Ok(DenoiseTree {
        condition,
        seed,
        schedule: schedule.clone(),
        window: window.to_vec(),
        branch,
        nodes,
        edges,
        leaves: frontier,
        nfe,
    })
}

impl DenoiseTree {
    pub fn leaf_latents(&self) -> Vec<Vec<f64>> {
        self.leaves
            .iter()
            .map(|&l| self.nodes[l].latent.clone())
            .collect()
    }

    /// Incoming edge of each leaf, in leaf order.
    pub fn leaf_edges(&self) -> Vec<usize> {
        self.leaves
            .iter()
            .map(|&l| self.nodes[l].parent_edge.expect("leaf has a parent"))
            .collect()
    }

    pub fn branching_edges(&self) -> impl Iterator<Item = &TreeEdge> {
        self.edges.iter().filter(|e| e.kind == EdgeKind::Branching)
    }

    /// Nodes with more than one child.
    pub fn branching_internal_nodes(&self) -> usize {
        self.nodes.iter().filter(|n| n.children.len() > 1).count()
    }

    /// Set the advantage of every leaf's incoming edge, in leaf order.
    pub fn set_leaf_advantages(&mut self, advantages: &[f64]) -> Result<()> {
        if advantages.len() != self.leaves.len() {
            return Err(Error::InvalidArgument(format!(
                "{} advantages for {} leaves",
                advantages.len(),
                self.leaves.len()
            )));
        }
        for (e, &a) in self.leaf_edges().into_iter().zip(advantages) {
            if self.edges[e].advantage.is_some() {
                return Err(Error::Precondition(format!(
                    "leaf edge {e} already has an advantage"
                )));
            }
            self.edges[e].advantage = Some(a);
        }
        Ok(())
    }

    /// Latents along the path from the root to `node`, root first.
    pub fn path_latents(&self, node: usize) -> Vec<&[f64]> {
        let mut out = vec![self.nodes[node].latent.as_slice()];
        let mut cur = node;
        while let Some(e) = self.nodes[cur].parent_edge {
            cur = self.edges[e].parent;
            out.push(self.nodes[cur].latent.as_slice());
        }
        out.reverse();
        out
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Velocity-field evaluations spent building `tree`: one per expanded node,
/// since all children of a node share one proposal mean.
pub fn nfe_count(tree: &DenoiseTree) -> usize {
    debug_assert_eq!(
        tree.nodes
            .iter()
            .filter(|n| n.step < tree.schedule.steps())
            .count(),
        tree.nfe
    );
    tree.nfe
}

/// NFE of `group` independent full trajectories over `steps` steps.
pub fn trajectory_nfe(group: usize, steps: usize) -> usize {
    group * steps
}

/// Effective group size `trees·b^d` and effective training steps
/// `trees·(b^d − 1)/(b − 1)`.
pub fn tree_stats(branch: usize, depth: u32, trees: usize) -> Result<(usize, usize)> {
    if branch < 2 || depth < 1 || trees < 1 {
        return Err(Error::InvalidArgument(format!(
            "tree_stats needs b >= 2, d >= 1, trees >= 1 (got {branch}, {depth}, {trees})"
        )));
    }
    let leaves = branch.pow(depth);
    Ok((trees * leaves, trees * (leaves - 1) / (branch - 1)))
}
