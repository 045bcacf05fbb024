//! Histogram split finding and best-first (leaf-wise) tree growth.
//!
//! Split gain follows the second-order form
//! gain = 1/2 * (G_L^2/(H_L+lambda) + G_R^2/(H_R+lambda)
//!               - (G_L+G_R)^2/(H_L+H_R+lambda)) - gamma,
//! maximized over every (feature, bin threshold) with both children
//! holding at least `min_samples_leaf` samples. Ties resolve to the lowest
//! feature index, then the lowest threshold.

use serde::{Deserialize, Serialize};

use super::bins::BinnedMatrix;
use super::GbdtConfig;

/// Summed gradient/hessian/count of one (feature, bin) cell.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HistogramBin {
    pub grad: f64,
    pub hess: f64,
    pub count: usize,
}

/// Per-feature, per-bin sums over a node's samples. Accumulation is
/// sequential in ascending sample order, so the result is deterministic.
pub fn node_histogram(
    binned: &BinnedMatrix,
    grad: &[f64],
    hess: &[f64],
    samples: &[usize],
    bins_per_feature: &[usize],
) -> Vec<Vec<HistogramBin>> {
    let mut hist: Vec<Vec<HistogramBin>> = bins_per_feature
        .iter()
        .map(|&n| vec![HistogramBin::default(); n])
        .collect();
    for &sample in samples {
        let row = binned.row(sample);
        let g = grad[sample];
        let h = hess[sample];
        for (feature, &bin) in row.iter().enumerate() {
            let cell = &mut hist[feature][bin as usize];
            cell.grad += g;
            cell.hess += h;
            cell.count += 1;
        }
    }
    hist
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    /// Split threshold in bin space: left child takes bins <= `bin`.
    pub bin: usize,
    pub gain: f64,
    pub left_count: usize,
    pub right_count: usize,
}

fn leaf_objective(grad: f64, hess: f64, lambda: f64) -> f64 {
    let denom = hess + lambda;
    if denom <= 0.0 {
        0.0
    } else {
        grad * grad / denom
    }
}

/// Scan a node's histogram for the gain-maximizing split. Returns None
/// when no admissible split has positive gain.
pub fn best_split(
    hist: &[Vec<HistogramBin>],
    lambda: f64,
    gamma: f64,
    min_samples_leaf: usize,
) -> Option<SplitCandidate> {
    let mut best: Option<SplitCandidate> = None;
    for (feature, bins) in hist.iter().enumerate() {
        let mut total = HistogramBin::default();
        for bin in bins {
            total.grad += bin.grad;
            total.hess += bin.hess;
            total.count += bin.count;
        }
        let parent = leaf_objective(total.grad, total.hess, lambda);
        let mut left = HistogramBin::default();
        for (bin_index, bin) in bins.iter().enumerate().take(bins.len().saturating_sub(1)) {
            left.grad += bin.grad;
            left.hess += bin.hess;
            left.count += bin.count;
            let right_count = total.count - left.count;
            if left.count < min_samples_leaf {
                continue;
            }
            if right_count < min_samples_leaf {
                break;
            }
            let right_grad = total.grad - left.grad;
            let right_hess = total.hess - left.hess;
            let gain = 0.5
                * (leaf_objective(left.grad, left.hess, lambda)
                    + leaf_objective(right_grad, right_hess, lambda)
                    - parent)
                - gamma;
            if best.map_or(true, |b| gain > b.gain) {
                best = Some(SplitCandidate {
                    feature,
                    bin: bin_index,
                    gain,
                    left_count: left.count,
                    right_count,
                });
            }
        }
    }
    best.filter(|b| b.gain > 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Internal { feature: usize, bin: usize, left: usize, right: usize },
    Leaf { value: f64 },
}

/// One regression tree over binned features. Node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    /// Route one binned row to its leaf value.
    pub fn predict_binned(&self, row: &[u8]) -> f64 {
        let mut index = 0;
        loop {
            match &self.nodes[index] {
                Node::Leaf { value } => return *value,
                Node::Internal { feature, bin, left, right } => {
                    index = if (row[*feature] as usize) <= *bin { *left } else { *right };
                }
            }
        }
    }
}

struct LeafState {
    node_slot: usize,
    samples: Vec<usize>,
    candidate: Option<SplitCandidate>,
}

fn sums_over(samples: &[usize], grad: &[f64], hess: &[f64]) -> (f64, f64) {
    let mut g = 0.0;
    let mut h = 0.0;
    for &s in samples {
        g += grad[s];
        h += hess[s];
    }
    (g, h)
}

fn leaf_value(grad: f64, hess: f64, cfg: &GbdtConfig) -> f64 {
    let denom = hess + cfg.lambda;
    if denom <= 0.0 {
        0.0
    } else {
        -grad / denom * cfg.learning_rate
    }
}

/// Grow one tree for one class by best-first expansion: repeatedly split
/// the pending leaf with the highest gain until `max_leaves` is reached or
/// no split has positive gain. Leaf values are -G/(H+lambda), scaled by
/// the learning rate.
pub fn grow_tree(
    binned: &BinnedMatrix,
    grad: &[f64],
    hess: &[f64],
    samples: &[usize],
    bins_per_feature: &[usize],
    cfg: &GbdtConfig,
) -> Tree {
    let (g, h) = sums_over(samples, grad, hess);
    let mut nodes = vec![Node::Leaf { value: leaf_value(g, h, cfg) }];
    let root_candidate = if samples.len() >= 2 * cfg.min_samples_leaf {
        let hist = node_histogram(binned, grad, hess, samples, bins_per_feature);
        best_split(&hist, cfg.lambda, cfg.gamma, cfg.min_samples_leaf)
    } else {
        None
    };
    let mut leaves = vec![LeafState { node_slot: 0, samples: samples.to_vec(), candidate: root_candidate }];
    let mut leaf_count = 1;

    while leaf_count < cfg.max_leaves {
        // Highest pending gain; first (oldest) leaf wins ties.
        let mut chosen: Option<usize> = None;
        for (index, leaf) in leaves.iter().enumerate() {
            if let Some(candidate) = leaf.candidate {
                let better = match chosen {
                    None => true,
                    Some(current) => candidate.gain > leaves[current].candidate.unwrap().gain,
                };
                if better {
                    chosen = Some(index);
                }
            }
        }
        let Some(chosen) = chosen else { break };
        let LeafState { node_slot, samples, candidate } = leaves.swap_remove(chosen);
        let split = candidate.unwrap();

        let mut left_samples = Vec::with_capacity(split.left_count);
        let mut right_samples = Vec::with_capacity(split.right_count);
        for &sample in &samples {
            if (binned.get(sample, split.feature) as usize) <= split.bin {
                left_samples.push(sample);
            } else {
                right_samples.push(sample);
            }
        }

        let left_slot = nodes.len();
        let right_slot = nodes.len() + 1;
        for child_samples in [&left_samples, &right_samples] {
            let (g, h) = sums_over(child_samples, grad, hess);
            nodes.push(Node::Leaf { value: leaf_value(g, h, cfg) });
        }
        nodes[node_slot] = Node::Internal {
            feature: split.feature,
            bin: split.bin,
            left: left_slot,
            right: right_slot,
        };
        leaf_count += 1;

        for (slot, child_samples) in [(left_slot, left_samples), (right_slot, right_samples)] {
            let candidate = if child_samples.len() >= 2 * cfg.min_samples_leaf {
                let hist = node_histogram(binned, grad, hess, &child_samples, bins_per_feature);
                best_split(&hist, cfg.lambda, cfg.gamma, cfg.min_samples_leaf)
            } else {
                None
            };
            leaves.push(LeafState { node_slot: slot, samples: child_samples, candidate });
        }
    }

    Tree { nodes }
}
