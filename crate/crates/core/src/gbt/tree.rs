use serde::{Deserialize, Serialize};

use crate::exec::Execution;

/// One node of a regression tree. Rows with `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub max_depth: usize,
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn leaf(value: f64) -> Self {
        RegressionTree {
            max_depth: 0,
            nodes: vec![Node::Leaf { value }],
        }
    }

    /// Single split on `feature` at `threshold`.
    pub fn stump(feature: usize, threshold: f64, left: f64, right: f64) -> Self {
        RegressionTree {
            max_depth: 1,
            nodes: vec![
                Node::Split {
                    feature,
                    threshold,
                    left: 1,
                    right: 2,
                },
                Node::Leaf { value: left },
                Node::Leaf { value: right },
            ],
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    /// Largest feature index referenced by a split.
    pub fn max_feature(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .max()
    }

    /// Structural check: children point forward and exist, leaves are
    /// finite, depth stays within `max_depth`.
    pub fn validate(&self) -> Result<(), String> {
        if self.nodes.is_empty() {
            return Err("tree has no nodes".into());
        }
        let mut depth = vec![usize::MAX; self.nodes.len()];
        depth[0] = 0;
        for (i, n) in self.nodes.iter().enumerate() {
            if depth[i] == usize::MAX {
                return Err(format!("node {i} is unreachable"));
            }
            match n {
                Node::Leaf { value } if !value.is_finite() => return Err(format!("leaf {i} is not finite")),
                Node::Leaf { .. } => {}
                Node::Split {
                    threshold, left, right, ..
                } => {
                    if !threshold.is_finite() {
                        return Err(format!("node {i} has a non-finite threshold"));
                    }
                    for &c in [left, right] {
                        if c <= i || c >= self.nodes.len() {
                            return Err(format!("node {i} has invalid child {c}"));
                        }
                        if depth[c] != usize::MAX {
                            return Err(format!("node {c} has two parents"));
                        }
                        depth[c] = depth[i] + 1;
                        if depth[c] > self.max_depth {
                            return Err(format!("node {c} deeper than max_depth {}", self.max_depth));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-row training statistics for one boosting round.
pub(crate) struct Targets<'a> {
    /// Negative gradient of the loss.
    pub residual: &'a [f64],
    /// Second derivative of the loss.
    pub hessian: &'a [f64],
    pub weight: &'a [f64],
}

pub(crate) struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
}

struct Candidate {
    feature: usize,
    threshold: f64,
    gain: f64,
}

/// Exact greedy builder over pre-sorted feature columns.
pub(crate) struct TreeBuilder<'a> {
    columns: &'a [Vec<f64>],
    targets: Targets<'a>,
    params: TreeParams,
    exec: Execution,
    nodes: Vec<Node>,
    goes_left: Vec<bool>,
}

impl<'a> TreeBuilder<'a> {
    pub fn new(columns: &'a [Vec<f64>], targets: Targets<'a>, params: TreeParams, exec: Execution) -> Self {
        let n = columns.first().map_or(0, Vec::len);
        TreeBuilder {
            columns,
            targets,
            params,
            exec,
            nodes: Vec::new(),
            goes_left: vec![false; n],
        }
    }

    /// `sorted[f]` lists the in-bag rows ordered by `(columns[f][row], row)`.
    pub fn build(mut self, sorted: Vec<Vec<u32>>) -> RegressionTree {
        self.grow(sorted, 0);
        RegressionTree {
            max_depth: self.params.max_depth,
            nodes: self.nodes,
        }
    }

    fn leaf_value(&self, rows: &[u32]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for &r in rows {
            let r = r as usize;
            num += self.targets.weight[r] * self.targets.residual[r];
            den += self.targets.weight[r] * self.targets.hessian[r];
        }
        // one Newton step; a vanishing curvature gives no update
        if den.abs() < 1e-150 {
            0.0
        } else {
            num / den
        }
    }

    fn grow(&mut self, sorted: Vec<Vec<u32>>, depth: usize) -> usize {
        let id = self.nodes.len();
        let rows = &sorted[0];
        let n = rows.len();
        self.nodes.push(Node::Leaf { value: 0.0 });

        let split = if depth < self.params.max_depth && n >= 2 * self.params.min_leaf.max(1) {
            self.best_split(&sorted)
        } else {
            None
        };
        let Some(split) = split else {
            self.nodes[id] = Node::Leaf {
                value: self.leaf_value(rows),
            };
            return id;
        };

        let col = &self.columns[split.feature];
        for &r in rows {
            self.goes_left[r as usize] = col[r as usize] <= split.threshold;
        }
        let mut left = Vec::with_capacity(sorted.len());
        let mut right = Vec::with_capacity(sorted.len());
        for list in sorted {
            let (l, r): (Vec<u32>, Vec<u32>) = list.into_iter().partition(|&r| self.goes_left[r as usize]);
            left.push(l);
            right.push(r);
        }
        let l = self.grow(left, depth + 1);
        let r = self.grow(right, depth + 1);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: l,
            right: r,
        };
        id
    }

    /// Best split by weighted squared-error reduction of the residuals. Ties
    /// go to the lowest feature index, then the lowest threshold.
    fn best_split(&self, sorted: &[Vec<u32>]) -> Option<Candidate> {
        let features: Vec<usize> = (0..sorted.len()).collect();
        let per_feature = self.exec.map(&features, |&f| self.best_for_feature(f, &sorted[f]));
        let mut best: Option<Candidate> = None;
        for c in per_feature.into_iter().flatten() {
            if best.as_ref().is_none_or(|b| c.gain > b.gain) {
                best = Some(c);
            }
        }
        best
    }

    fn best_for_feature(&self, feature: usize, rows: &[u32]) -> Option<Candidate> {
        let col = &self.columns[feature];
        let n = rows.len();
        let min_leaf = self.params.min_leaf.max(1);
        let (w, r) = (self.targets.weight, self.targets.residual);
        let (mut total_s, mut total_w) = (0.0, 0.0);
        for &i in rows {
            let i = i as usize;
            total_s += w[i] * r[i];
            total_w += w[i];
        }
        let parent = total_s * total_s / total_w;

        let mut best: Option<Candidate> = None;
        let (mut sl, mut wl) = (0.0, 0.0);
        for pos in 0..n - 1 {
            let i = rows[pos] as usize;
            sl += w[i] * r[i];
            wl += w[i];
            let left_n = pos + 1;
            if left_n < min_leaf {
                continue;
            }
            if n - left_n < min_leaf {
                break;
            }
            let a = col[i];
            let b = col[rows[pos + 1] as usize];
            if b.partial_cmp(&a) != Some(std::cmp::Ordering::Greater) {
                continue;
            }
            let sr = total_s - sl;
            let wr = total_w - wl;
            if wl <= 0.0 || wr <= 0.0 {
                continue;
            }
            let gain = sl * sl / wl + sr * sr / wr - parent;
            if gain > 0.0 && best.as_ref().is_none_or(|c| gain > c.gain) {
                let mid = a + (b - a) / 2.0;
                let threshold = if mid < b { mid } else { a };
                best = Some(Candidate {
                    feature,
                    threshold,
                    gain,
                });
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stump_prediction() {
        let t = RegressionTree::stump(0, 0.5, -1.0, 1.0);
        assert_eq!(t.predict(&[0.2]), -1.0);
        assert_eq!(t.predict(&[0.5]), -1.0);
        assert_eq!(t.predict(&[0.7]), 1.0);
        assert!(t.validate().is_ok());
    }

    #[test]
    fn validate_catches_broken_trees() {
        let mut t = RegressionTree::stump(0, 0.5, -1.0, 1.0);
        t.nodes.pop();
        assert!(t.validate().is_err());
        let mut t = RegressionTree::stump(0, 0.5, -1.0, f64::NAN);
        assert!(t.validate().is_err());
        t = RegressionTree::stump(0, 0.5, -1.0, 1.0);
        t.max_depth = 0;
        assert!(t.validate().is_err());
        let cyc = RegressionTree {
            max_depth: 3,
            nodes: vec![
                Node::Split { feature: 0, threshold: 0.0, left: 1, right: 1 },
                Node::Leaf { value: 0.0 },
            ],
        };
        assert!(cyc.validate().is_err());
    }
}
