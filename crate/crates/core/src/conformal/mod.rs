//! Split conformal calibration of the decomposed uncertainty.
//!
//! Nonconformity is the residual scaled by the combined uncertainty,
//! `|y - y_hat| / (sqrt(sigma_a^2 + sigma_e^2) + eps)`. A global quantile gives
//! marginal `1 - alpha` coverage; a shallow regression tree over the feature
//! vectors stratifies the calibration set and each sufficiently populated leaf
//! gets its own, slightly more conservative, quantile.

mod tree;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use tree::{StratTree, TreeNode};

use crate::error::{Error, Result};
use crate::stats::{order_statistic, sorted};

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_MIN_LEAF: usize = 30;
pub const DEFAULT_MAX_DEPTH: usize = 5;
pub const DEFAULT_EPS: f64 = 1e-10;

pub fn combined_sigma(sigma_alea: f64, sigma_epis: f64) -> f64 {
    (sigma_alea * sigma_alea + sigma_epis * sigma_epis).sqrt()
}

pub fn nonconformity(y: f64, y_hat: f64, sigma_alea: f64, sigma_epis: f64, eps: f64) -> f64 {
    (y - y_hat).abs() / (combined_sigma(sigma_alea, sigma_epis) + eps)
}

/// 1-indexed order statistic `ceil((1 - alpha)(n + 1))` used by the conformal quantile.
pub fn quantile_rank(n: usize, alpha: f64) -> usize {
    // absorb rounding in (1 - alpha)(n + 1) so exact integers do not round up
    let x = (1.0 - alpha) * (n as f64 + 1.0);
    (x - 1e-9 * x.max(1.0)).ceil().max(1.0) as usize
}

/// Conformal quantile at level `ceil((1 - alpha)(n + 1)) / n`.
///
/// When that level exceeds 1 the maximum score is returned and `saturated` is set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConformalQuantile {
    pub value: f64,
    pub saturated: bool,
}

pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<ConformalQuantile> {
    if scores.is_empty() {
        return Err(Error::Conformal("conformal quantile of an empty score set".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Conformal(format!("alpha {alpha} outside (0, 1)")));
    }
    let n = scores.len();
    let rank = quantile_rank(n, alpha);
    let s = sorted(scores);
    if rank > n {
        log::warn!(
            "conformal quantile: {n} scores are too few for alpha = {alpha}; using the maximum"
        );
        return Ok(ConformalQuantile {
            value: s[n - 1],
            saturated: true,
        });
    }
    Ok(ConformalQuantile {
        value: order_statistic(&s, rank),
        saturated: false,
    })
}

/// Leaf miscoverage `alpha * (1 - 1/sqrt(n_leaf))`.
pub fn leaf_alpha(alpha: f64, n_leaf: usize) -> f64 {
    alpha * (1.0 - 1.0 / (n_leaf as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeafQuantile {
    pub q: f64,
    pub n: usize,
    pub alpha: f64,
    /// Too few calibration points; intervals use `q_global`.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub alpha: f64,
    pub q_global: f64,
    pub tree: StratTree,
    pub leaf_quantiles: BTreeMap<usize, LeafQuantile>,
    pub min_leaf_n: usize,
    pub eps: f64,
}

/// One calibration (or test) point seen by the calibration layer.
#[derive(Debug, Clone, Copy)]
pub struct CalPoint<'a> {
    pub feature: &'a [f64],
    pub y: f64,
    pub y_hat: f64,
    pub sigma_alea: f64,
    pub sigma_epis: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantileSource {
    Leaf(usize),
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    pub lo: f64,
    pub hi: f64,
    pub q_used: f64,
    pub source: QuantileSource,
}

impl PredictionInterval {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, y: f64) -> bool {
        self.lo <= y && y <= self.hi
    }

    /// Interval intersected with the feasible conformity range `[0, 1]`.
    pub fn clamped(&self) -> (f64, f64) {
        (self.lo.clamp(0.0, 1.0), self.hi.clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationOptions {
    pub alpha: f64,
    pub min_leaf_n: usize,
    pub max_depth: usize,
    pub eps: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            alpha: DEFAULT_ALPHA,
            min_leaf_n: DEFAULT_MIN_LEAF,
            max_depth: DEFAULT_MAX_DEPTH,
            eps: DEFAULT_EPS,
        }
    }
}

pub const MIN_CALIBRATION: usize = 20;

impl CalibrationModel {
    pub fn fit(points: &[CalPoint<'_>], opts: CalibrationOptions) -> Result<Self> {
        if points.len() < MIN_CALIBRATION {
            return Err(Error::Conformal(format!(
                "need at least {MIN_CALIBRATION} calibration points, got {}",
                points.len()
            )));
        }
        if !(opts.eps > 0.0) {
            return Err(Error::Conformal("eps must be > 0".into()));
        }
        let scores: Vec<f64> = points
            .iter()
            .map(|p| nonconformity(p.y, p.y_hat, p.sigma_alea, p.sigma_epis, opts.eps))
            .collect();
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::numeric("conformal", "non-finite nonconformity score"));
        }
        let q_global = conformal_quantile(&scores, opts.alpha)?.value;
        let features: Vec<&[f64]> = points.iter().map(|p| p.feature).collect();
        let tree = StratTree::fit(&features, &scores, opts.max_depth, opts.min_leaf_n);
        let mut by_leaf: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (f, s) in features.iter().zip(&scores) {
            by_leaf.entry(tree.leaf(f)).or_default().push(*s);
        }
        let mut leaf_quantiles = BTreeMap::new();
        for (id, node) in tree.leaves() {
            let leaf_scores = by_leaf.get(&id).map(Vec::as_slice).unwrap_or(&[]);
            let n = leaf_scores.len();
            debug_assert_eq!(n, node.n);
            let entry = if n >= opts.min_leaf_n && n > 0 {
                let a = leaf_alpha(opts.alpha, n);
                LeafQuantile {
                    q: conformal_quantile(leaf_scores, a)?.value,
                    n,
                    alpha: a,
                    fallback: false,
                }
            } else {
                LeafQuantile {
                    q: q_global,
                    n,
                    alpha: opts.alpha,
                    fallback: true,
                }
            };
            leaf_quantiles.insert(id, entry);
        }
        Ok(CalibrationModel {
            alpha: opts.alpha,
            q_global,
            tree,
            leaf_quantiles,
            min_leaf_n: opts.min_leaf_n,
            eps: opts.eps,
        })
    }

    /// Quantile and its source for a feature vector.
    pub fn quantile_for(&self, v: &[f64]) -> (f64, QuantileSource) {
        let leaf = self.tree.leaf(v);
        match self.leaf_quantiles.get(&leaf) {
            Some(lq) if !lq.fallback => (lq.q, QuantileSource::Leaf(leaf)),
            _ => (self.q_global, QuantileSource::Global),
        }
    }

    pub fn predict_interval(
        &self,
        v: &[f64],
        y_hat: f64,
        sigma_alea: f64,
        sigma_epis: f64,
    ) -> PredictionInterval {
        let (q, source) = self.quantile_for(v);
        interval(y_hat, q, sigma_alea, sigma_epis, source)
    }

    /// Interval from the global quantile only.
    pub fn predict_global(&self, y_hat: f64, sigma_alea: f64, sigma_epis: f64) -> PredictionInterval {
        interval(y_hat, self.q_global, sigma_alea, sigma_epis, QuantileSource::Global)
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_quantiles.len()
    }
}

fn interval(y_hat: f64, q: f64, sa: f64, se: f64, source: QuantileSource) -> PredictionInterval {
    let half = q * combined_sigma(sa, se);
    PredictionInterval {
        lo: y_hat - half,
        hi: y_hat + half,
        q_used: q,
        source,
    }
}

/// Split conformal on raw residuals `|y - y_hat|`, the sigma-free baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualBaseline {
    pub alpha: f64,
    pub q: f64,
}

impl ResidualBaseline {
    pub fn fit(y: &[f64], y_hat: &[f64], alpha: f64) -> Result<Self> {
        if y.len() != y_hat.len() {
            return Err(Error::Conformal("labels and predictions are not aligned".into()));
        }
        let residuals: Vec<f64> = y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).collect();
        Ok(ResidualBaseline {
            alpha,
            q: conformal_quantile(&residuals, alpha)?.value,
        })
    }

    pub fn interval(&self, y_hat: f64) -> PredictionInterval {
        PredictionInterval {
            lo: y_hat - self.q,
            hi: y_hat + self.q,
            q_used: self.q,
            source: QuantileSource::Global,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub coverage: f64,
    pub mean_width: f64,
    pub mean_width_clamped: f64,
    pub n_test: usize,
}

/// Empirical coverage and mean width of `(interval, y)` pairs.
pub fn evaluate_coverage<I>(pairs: I) -> Result<CoverageReport>
where
    I: IntoIterator<Item = (PredictionInterval, f64)>,
{
    let (mut n, mut hit, mut width, mut clamped) = (0usize, 0usize, 0.0, 0.0);
    for (iv, y) in pairs {
        n += 1;
        hit += usize::from(iv.contains(y));
        width += iv.width();
        let (lo, hi) = iv.clamped();
        clamped += hi - lo;
    }
    if n == 0 {
        return Err(Error::Conformal("coverage of an empty test set".into()));
    }
    Ok(CoverageReport {
        coverage: hit as f64 / n as f64,
        mean_width: width / n as f64,
        mean_width_clamped: clamped / n as f64,
        n_test: n,
    })
}
