//! Axis-aligned regression tree used to stratify the calibration set.
//!
//! Splits maximize the reduction in squared error of the target (the
//! nonconformity score). Candidate thresholds are midpoints between
//! consecutive distinct feature values; ties keep the lowest feature index and
//! the lowest threshold, so fitting is deterministic.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    /// Split feature; `None` for leaves.
    pub feature: Option<usize>,
    pub threshold: f64,
    pub left: Option<usize>,
    pub right: Option<usize>,
    pub n: usize,
    pub mean: f64,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.feature.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratTree {
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Node 0 is the root.
    pub nodes: Vec<TreeNode>,
}

impl StratTree {
    pub fn fit(features: &[&[f64]], target: &[f64], max_depth: usize, min_leaf: usize) -> Self {
        assert_eq!(features.len(), target.len());
        let mut tree = StratTree {
            max_depth,
            min_leaf: min_leaf.max(1),
            nodes: Vec::new(),
        };
        let idx: Vec<usize> = (0..target.len()).collect();
        tree.grow(features, target, idx, 0);
        tree
    }

    fn grow(&mut self, x: &[&[f64]], y: &[f64], idx: Vec<usize>, depth: usize) -> usize {
        let n = idx.len();
        let mean = if n == 0 {
            0.0
        } else {
            idx.iter().map(|&i| y[i]).sum::<f64>() / n as f64
        };
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            feature: None,
            threshold: 0.0,
            left: None,
            right: None,
            n,
            mean,
        });
        if depth >= self.max_depth || n < 2 * self.min_leaf {
            return id;
        }
        let Some((feature, threshold)) = self.best_split(x, y, &idx) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| x[i][feature] <= threshold);
        let left = self.grow(x, y, l, depth + 1);
        let right = self.grow(x, y, r, depth + 1);
        let node = &mut self.nodes[id];
        node.feature = Some(feature);
        node.threshold = threshold;
        node.left = Some(left);
        node.right = Some(right);
        id
    }

    fn best_split(&self, x: &[&[f64]], y: &[f64], idx: &[usize]) -> Option<(usize, f64)> {
        let n = idx.len();
        let d = x[idx[0]].len();
        let total: f64 = idx.iter().map(|&i| y[i]).sum();
        let total_sq: f64 = idx.iter().map(|&i| y[i] * y[i]).sum();
        let parent_sse = total_sq - total * total / n as f64;
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order: Vec<usize> = idx.to_vec();
        #[allow(clippy::needless_range_loop)] // `f` indexes the inner feature vectors
        for f in 0..d {
            order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
            let (mut ls, mut lsq) = (0.0, 0.0);
            for pos in 0..n - 1 {
                let i = order[pos];
                ls += y[i];
                lsq += y[i] * y[i];
                let nl = pos + 1;
                let nr = n - nl;
                if nl < self.min_leaf || nr < self.min_leaf {
                    continue;
                }
                let (a, b) = (x[i][f], x[order[pos + 1]][f]);
                if a == b {
                    continue;
                }
                let rs = total - ls;
                let rsq = total_sq - lsq;
                let sse = (lsq - ls * ls / nl as f64) + (rsq - rs * rs / nr as f64);
                let gain = parent_sse - sse;
                if best.is_none_or(|(g, ..)| gain > g) {
                    best = Some((gain, f, 0.5 * (a + b)));
                }
            }
        }
        let tol = 1e-12 * parent_sse.abs().max(f64::MIN_POSITIVE);
        best.filter(|&(g, ..)| g > tol).map(|(_, f, t)| (f, t))
    }

    /// Id of the leaf node `v` falls into.
    pub fn leaf(&self, v: &[f64]) -> usize {
        let mut id = 0;
        loop {
            let node = &self.nodes[id];
            match node.feature {
                None => return id,
                Some(f) => {
                    id = if v[f] <= node.threshold {
                        node.left.expect("split node has children")
                    } else {
                        node.right.expect("split node has children")
                    }
                }
            }
        }
    }

    pub fn leaves(&self) -> impl Iterator<Item = (usize, &TreeNode)> {
        self.nodes.iter().enumerate().filter(|(_, n)| n.is_leaf())
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &StratTree, id: usize) -> usize {
            let n = &t.nodes[id];
            match (n.left, n.right) {
                (Some(l), Some(r)) => 1 + walk(t, l).max(walk(t, r)),
                _ => 0,
            }
        }
        walk(self, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_two_levels() {
        let xs: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64, 0.0]).collect();
        let y: Vec<f64> = (0..100).map(|i| if i < 50 { 1.0 } else { 5.0 }).collect();
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let t = StratTree::fit(&refs, &y, 5, 10);
        assert_eq!(t.nodes[0].feature, Some(0));
        assert_eq!(t.nodes[0].threshold, 49.5);
        assert_ne!(t.leaf(&[10.0, 0.0]), t.leaf(&[90.0, 0.0]));
        // pure children do not split further
        assert_eq!(t.leaves().count(), 2);
    }

    #[test]
    fn identical_features_give_one_leaf() {
        let xs = vec![vec![1.0, 2.0]; 50];
        let y: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let t = StratTree::fit(&refs, &y, 5, 5);
        assert_eq!(t.nodes.len(), 1);
    }

    proptest::proptest! {
        #[test]
        fn leaves_respect_limits(
            pts in proptest::collection::vec((proptest::collection::vec(-5.0f64..5.0, 3), -3.0f64..3.0), 1..200),
            min_leaf in 1usize..20,
        ) {
            let xs: Vec<&[f64]> = pts.iter().map(|p| p.0.as_slice()).collect();
            let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
            let t = StratTree::fit(&xs, &y, 5, min_leaf);
            proptest::prop_assert!(t.depth() <= 5);
            let total: usize = t.leaves().map(|(_, l)| l.n).sum();
            proptest::prop_assert_eq!(total, pts.len());
            if t.nodes.len() > 1 {
                for (_, l) in t.leaves() {
                    proptest::prop_assert!(l.n >= min_leaf);
                }
            }
            let mut counts = std::collections::HashMap::new();
            for x in &xs {
                let id = t.leaf(x);
                proptest::prop_assert!(t.nodes[id].is_leaf());
                *counts.entry(id).or_insert(0usize) += 1;
            }
            for (id, c) in counts {
                proptest::prop_assert_eq!(c, t.nodes[id].n);
            }
        }
    }
}
