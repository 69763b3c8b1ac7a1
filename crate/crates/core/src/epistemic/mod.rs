//! Epistemic uncertainty from three representation-support signatures:
//!
//! * **support deficiency**: magnitude of the net tempered inverse-square
//!   "repulsion" from the `k_supp` nearest calibration points,
//!   `F(d) = exp(-d/tau) / (d^2 + eps)`;
//! * **geometric collapse**: one minus the normalized effective rank
//!   `exp(H)` of the local second-moment matrix of the `k_rank` neighbours;
//! * **cross-layer divergence**: mean `1 - cos` between consecutive layer
//!   features.
//!
//! Each component is min-max normalized over the calibration set and the three
//! are combined with simplex weights chosen to decorrelate the result from the
//! aleatoric score.

mod knn;

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use knn::{Neighbor, NeighborIndex};

use crate::error::{Error, Result};
use crate::feature_store::{FeatureRecord, FeatureStore};
use crate::stats::{mean, pearson};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpistemicConfig {
    pub k_supp: usize,
    pub tau: f64,
    pub eps_supp: f64,
    pub k_rank: usize,
    /// Encoder layers the layer features were tapped from; informational.
    pub layer_indices: Vec<usize>,
    /// Mean-center the neighbour rows before forming the local matrix.
    pub center_local: bool,
    /// Separation bonus weight used when shift labels are supplied.
    pub beta: f64,
}

impl Default for EpistemicConfig {
    fn default() -> Self {
        EpistemicConfig {
            k_supp: 100,
            tau: 1.0,
            eps_supp: 1e-6,
            k_rank: 50,
            layer_indices: vec![4, 9, 15, 21],
            center_local: false,
            beta: 0.5,
        }
    }
}

impl EpistemicConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_supp < 1 {
            return Err(Error::Epistemic("k_supp must be >= 1".into()));
        }
        if self.k_rank < 2 {
            return Err(Error::Epistemic("k_rank must be >= 2".into()));
        }
        if !(self.tau > 0.0) || !(self.eps_supp > 0.0) {
            return Err(Error::Epistemic("tau and eps_supp must be > 0".into()));
        }
        if self.layer_indices.len() < 2 || self.layer_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Epistemic(
                "layer_indices must be strictly increasing with at least 2 entries".into(),
            ));
        }
        Ok(())
    }
}

/// Simplex weights `(w_supp, w_rank, w_grad)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub supp: f64,
    pub rank: f64,
    pub grad: f64,
}

impl Weights {
    pub const UNIFORM: Weights = Weights {
        supp: 1.0 / 3.0,
        rank: 1.0 / 3.0,
        grad: 1.0 / 3.0,
    };

    pub fn new(supp: f64, rank: f64, grad: f64) -> Result<Self> {
        let w = Weights { supp, rank, grad };
        let all = [supp, rank, grad];
        if all.iter().any(|x| !(0.0..=1.0).contains(x)) || ((supp + rank + grad) - 1.0).abs() > 1e-9 {
            return Err(Error::Epistemic(format!(
                "weights {all:?} must lie in [0, 1] and sum to 1"
            )));
        }
        Ok(w)
    }

    pub fn combine(&self, c: &Components) -> f64 {
        self.supp * c.supp + self.rank * c.rank + self.grad * c.grad
    }

    fn distance_to_uniform(&self) -> f64 {
        let u = 1.0 / 3.0;
        ((self.supp - u).powi(2) + (self.rank - u).powi(2) + (self.grad - u).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub supp: f64,
    pub rank: f64,
    pub grad: f64,
}

impl Components {
    pub fn as_array(&self) -> [f64; 3] {
        [self.supp, self.rank, self.grad]
    }
}

/// Raw net-force magnitude `|sum F(d) (v - u)/d|`; coincident neighbours are skipped.
pub fn support_deficiency_raw<'a>(
    v: &[f64],
    neighbors: impl IntoIterator<Item = &'a [f64]>,
    tau: f64,
    eps: f64,
) -> f64 {
    let mut net = vec![0.0; v.len()];
    for u in neighbors {
        let d = v
            .iter()
            .zip(u)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if d == 0.0 {
            continue;
        }
        let scale = (-d / tau).exp() / (d * d + eps) / d;
        for ((n, a), b) in net.iter_mut().zip(v).zip(u) {
            *n += scale * (a - b);
        }
    }
    net.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Collapse score from a spectrum: `1 - (exp(H) - 1)/(d - 1)`, clamped to `[0, 1]`.
///
/// Missing eigenvalues (when fewer than `d` are supplied) count as zeros.
/// Returns `None` when the spectrum sums to zero.
pub fn collapse_from_eigenvalues(eigenvalues: &[f64], d: usize) -> Option<f64> {
    let clamped: Vec<f64> = eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let entropy: f64 = clamped
        .iter()
        .map(|&l| l / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    let r_eff = entropy.exp();
    Some((1.0 - (r_eff - 1.0) / (d as f64 - 1.0)).clamp(0.0, 1.0))
}

/// Geometric collapse of a neighbour set in ambient dimension `d = rows[0].len()`.
///
/// Returns the score and whether the spectrum was all zero (score forced to 1).
pub fn geometric_collapse(rows: &[&[f64]], center: bool) -> Result<(f64, bool)> {
    let k = rows.len();
    if k < 2 {
        return Err(Error::Epistemic(format!(
            "geometric collapse needs at least 2 neighbours, got {k}"
        )));
    }
    let d = rows[0].len();
    if d < 2 {
        return Err(Error::Epistemic(
            "geometric collapse needs feature dimension >= 2".into(),
        ));
    }
    let mut x = DMatrix::from_fn(k, d, |i, j| rows[i][j]);
    if center {
        for j in 0..d {
            let m = x.column(j).mean();
            x.column_mut(j).add_scalar_mut(-m);
        }
    }
    // X^T X and X X^T share their nonzero spectrum; decompose the smaller one
    let gram = if k < d {
        &x * x.transpose()
    } else {
        x.transpose() * &x
    } / k as f64;
    let eig = nalgebra::SymmetricEigen::new(gram).eigenvalues;
    match collapse_from_eigenvalues(eig.as_slice(), d) {
        Some(s) => Ok((s, false)),
        None => Ok((1.0, true)),
    }
}

/// Mean over consecutive layer pairs of `1 - cos(f_l, f_{l+1})`.
pub fn cross_layer_divergence(layers: &[Vec<f64>]) -> Result<f64> {
    if layers.len() < 2 {
        return Err(Error::Epistemic(format!(
            "cross-layer divergence needs at least 2 layers, got {}",
            layers.len()
        )));
    }
    let norms = layers
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let n = f.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 && n.is_finite() {
                Ok(n)
            } else {
                Err(Error::Epistemic(format!("layer {i} has zero or non-finite norm")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for l in 0..layers.len() - 1 {
        let (a, b) = (&layers[l], &layers[l + 1]);
        if a.len() != b.len() {
            return Err(Error::Epistemic(format!(
                "layers {l} and {} have widths {} and {}; pool them to a shared width",
                l + 1,
                a.len(),
                b.len()
            )));
        }
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let cos = (dot / (norms[l] * norms[l + 1])).clamp(-1.0, 1.0);
        total += 1.0 - cos;
    }
    Ok(total / (layers.len() - 1) as f64)
}

/// Min-max normalizer fitted on calibration values, clamped at test time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn fit(values: &[f64]) -> Self {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        MinMax { min, max }
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.max > self.min)
    }

    /// Degenerate ranges map everything to 0.
    pub fn apply(&self, x: f64) -> f64 {
        if self.is_degenerate() {
            0.0
        } else {
            ((x - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
        }
    }
}

/// Result of the simplex grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFit {
    pub weights: Weights,
    pub objective: f64,
    /// `corr(sigma_epis, sigma_alea)` at the chosen weights (0 when undefined).
    pub correlation: f64,
    pub separation: f64,
    pub warnings: Vec<String>,
}

pub const GRID_DIVISIONS: usize = 20;
const TIE_TOLERANCE: f64 = 1e-9;

/// Exhaustive search over the 0.05-step simplex minimizing
/// `|corr(w . c, sigma_alea)| - beta * separation(w)`.
///
/// `separation` is the mean combined score of shift-labelled records minus the
/// mean of the rest; it only contributes when labels with both classes are
/// given. Near-ties resolve to the candidate closest to uniform weights.
/// With `allow_grad = false` the search is restricted to `w_grad = 0`.
pub fn optimize_weights(
    components: &[Components],
    aleatoric: &[f64],
    shift_labels: Option<&[bool]>,
    beta: f64,
    allow_grad: bool,
) -> Result<WeightFit> {
    let n = components.len();
    if n < 10 {
        return Err(Error::Epistemic(format!(
            "weight optimization needs at least 10 records, got {n}"
        )));
    }
    if aleatoric.len() != n {
        return Err(Error::Epistemic(
            "components and aleatoric scores are not aligned".into(),
        ));
    }
    let mut warnings = Vec::new();
    let cols: [Vec<f64>; 3] = [0, 1, 2].map(|j| components.iter().map(|c| c.as_array()[j]).collect());
    for (name, col) in ["supp", "rank", "grad"].iter().zip(&cols) {
        if (*name != "grad" || allow_grad) && MinMax::fit(col).is_degenerate() {
            warnings.push(format!("component `{name}` is constant over calibration"));
        }
    }
    if MinMax::fit(aleatoric).is_degenerate() {
        warnings.push("aleatoric scores are constant; correlation term treated as 0".into());
    }
    let labels = shift_labels.filter(|l| {
        l.len() == n && l.iter().any(|&b| b) && l.iter().any(|&b| !b)
    });
    let beta = if labels.is_some() { beta } else { 0.0 };

    let mut best: Option<(f64, f64, Weights, f64, f64)> = None;
    let step = 1.0 / GRID_DIVISIONS as f64;
    let mut combined = vec![0.0; n];
    for i in 0..=GRID_DIVISIONS {
        for j in 0..=GRID_DIVISIONS - i {
            let g = GRID_DIVISIONS - i - j;
            if g > 0 && !allow_grad {
                continue;
            }
            let w = Weights {
                supp: i as f64 * step,
                rank: j as f64 * step,
                grad: g as f64 * step,
            };
            for (s, c) in combined.iter_mut().zip(components) {
                *s = w.combine(c);
            }
            let corr = pearson(&combined, aleatoric).unwrap_or(0.0);
            let sep = match labels {
                Some(l) => {
                    let pick = |flag: bool| -> Vec<f64> {
                        combined
                            .iter()
                            .zip(l)
                            .filter(|(_, &b)| b == flag)
                            .map(|(s, _)| *s)
                            .collect()
                    };
                    mean(&pick(true)) - mean(&pick(false))
                }
                None => 0.0,
            };
            let objective = corr.abs() - beta * sep;
            let dist = w.distance_to_uniform();
            let better = match &best {
                None => true,
                Some((best_obj, best_dist, ..)) => {
                    objective < best_obj - TIE_TOLERANCE
                        || (objective <= best_obj + TIE_TOLERANCE && dist < best_dist - 1e-12)
                }
            };
            if better {
                best = Some((objective, dist, w, corr, sep));
            }
        }
    }
    let (objective, _, weights, correlation, separation) = best.expect("grid is non-empty");
    Ok(WeightFit {
        weights,
        objective,
        correlation,
        separation,
        warnings,
    })
}

/// Serializable part of the epistemic model. The neighbour index is rebuilt from
/// the calibration records listed in `calibration_ids`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpistemicBundle {
    pub weights: Weights,
    pub config: EpistemicConfig,
    pub supp_norm: MinMax,
    pub rank_norm: MinMax,
    pub grad_norm: Option<MinMax>,
    pub calibration_ids: Vec<String>,
    #[serde(default)]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct EpistemicModel {
    bundle: EpistemicBundle,
    index: NeighborIndex,
    id_to_index: HashMap<String, usize>,
}

/// Calibration-time outputs next to the fitted model.
#[derive(Debug, Clone)]
pub struct EpistemicFit {
    pub model: EpistemicModel,
    /// Normalized components of each calibration record (leave-one-out).
    pub components: Vec<Components>,
    pub scores: Vec<f64>,
    pub weight_fit: Option<WeightFit>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawComponents {
    pub supp: f64,
    pub rank: f64,
    pub grad: Option<f64>,
}

impl EpistemicModel {
    /// Fits normalizers and weights on the calibration store.
    ///
    /// `aleatoric` holds the calibration aleatoric scores in store order. Forced
    /// weights skip the search.
    pub fn fit(
        calibration: &FeatureStore,
        aleatoric: &[f64],
        config: EpistemicConfig,
        shift_labels: Option<&[bool]>,
        forced_weights: Option<Weights>,
    ) -> Result<EpistemicFit> {
        config.validate()?;
        let index = NeighborIndex::new(calibration.features())?;
        let with_layers = calibration.has_layer_features();
        if let Some(w) = forced_weights {
            if w.grad > 0.0 && !with_layers {
                return Err(Error::Epistemic(
                    "w_grad > 0 but calibration records carry no layer features".into(),
                ));
            }
        }
        let ids: Vec<String> = calibration.records().iter().map(|r| r.id.clone()).collect();
        let id_to_index = ids.iter().cloned().enumerate().map(|(i, id)| (id, i)).collect();
        let mut model = EpistemicModel {
            bundle: EpistemicBundle {
                weights: forced_weights.unwrap_or(Weights::UNIFORM),
                config,
                supp_norm: MinMax { min: 0.0, max: 0.0 },
                rank_norm: MinMax { min: 0.0, max: 0.0 },
                grad_norm: None,
                calibration_ids: ids,
                flags: Vec::new(),
            },
            index,
            id_to_index,
        };
        let raw = calibration
            .records()
            .iter()
            .enumerate()
            .map(|(i, r)| model.raw_components(r, Some(i), with_layers))
            .collect::<Result<Vec<_>>>()?;
        let supp: Vec<f64> = raw.iter().map(|r| r.supp).collect();
        let rank: Vec<f64> = raw.iter().map(|r| r.rank).collect();
        model.bundle.supp_norm = MinMax::fit(&supp);
        model.bundle.rank_norm = MinMax::fit(&rank);
        if with_layers {
            let grad: Vec<f64> = raw.iter().map(|r| r.grad.unwrap_or(0.0)).collect();
            model.bundle.grad_norm = Some(MinMax::fit(&grad));
        }
        for (name, norm) in [
            ("supp", Some(model.bundle.supp_norm)),
            ("rank", Some(model.bundle.rank_norm)),
            ("grad", model.bundle.grad_norm),
        ] {
            if norm.is_some_and(|n| n.is_degenerate()) {
                model
                    .bundle
                    .flags
                    .push(format!("degenerate {name} normalization; component scored as 0"));
            }
        }
        let components: Vec<Components> = raw.iter().map(|r| model.normalize(r)).collect();
        let weight_fit = match forced_weights {
            Some(_) => None,
            None => {
                let fit = optimize_weights(
                    &components,
                    aleatoric,
                    shift_labels,
                    model.bundle.config.beta,
                    with_layers,
                )?;
                model.bundle.weights = fit.weights;
                Some(fit)
            }
        };
        let scores = components
            .iter()
            .map(|c| model.bundle.weights.combine(c))
            .collect();
        Ok(EpistemicFit {
            model,
            components,
            scores,
            weight_fit,
        })
    }

    /// Restores a model from its bundle and the calibration store it was fitted on.
    pub fn from_bundle(bundle: EpistemicBundle, calibration: &FeatureStore) -> Result<Self> {
        let by_id: HashMap<&str, &FeatureRecord> =
            calibration.records().iter().map(|r| (r.id.as_str(), r)).collect();
        let rows = bundle
            .calibration_ids
            .iter()
            .map(|id| {
                by_id.get(id.as_str()).map(|r| r.feature.as_slice()).ok_or_else(|| {
                    Error::Epistemic(format!("calibration record `{id}` missing from store"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let index = NeighborIndex::new(rows)?;
        let id_to_index = bundle
            .calibration_ids
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, id)| (id, i))
            .collect();
        Ok(EpistemicModel {
            bundle,
            index,
            id_to_index,
        })
    }

    pub fn bundle(&self) -> &EpistemicBundle {
        &self.bundle
    }

    pub fn weights(&self) -> Weights {
        self.bundle.weights
    }

    pub fn index(&self) -> &NeighborIndex {
        &self.index
    }

    fn raw_components(
        &self,
        record: &FeatureRecord,
        exclude: Option<usize>,
        with_layers: bool,
    ) -> Result<RawComponents> {
        let cfg = &self.bundle.config;
        let v = record.feature.as_slice();
        let k = cfg.k_supp.max(cfg.k_rank);
        let neighbors = self.index.query_excluding(v, k, exclude)?;
        let supp = support_deficiency_raw(
            v,
            neighbors[..cfg.k_supp].iter().map(|n| self.index.point(n.index)),
            cfg.tau,
            cfg.eps_supp,
        );
        let rows: Vec<&[f64]> = neighbors[..cfg.k_rank]
            .iter()
            .map(|n| self.index.point(n.index))
            .collect();
        let (rank, _) = geometric_collapse(&rows, cfg.center_local)?;
        let grad = match (&record.layer_features, with_layers) {
            (Some(layers), true) => Some(cross_layer_divergence(layers).map_err(|e| {
                Error::Epistemic(format!("record `{}`: {e}", record.id))
            })?),
            _ => None,
        };
        Ok(RawComponents { supp, rank, grad })
    }

    fn normalize(&self, raw: &RawComponents) -> Components {
        Components {
            supp: self.bundle.supp_norm.apply(raw.supp),
            rank: self.bundle.rank_norm.apply(raw.rank),
            grad: match (self.bundle.grad_norm, raw.grad) {
                (Some(n), Some(g)) => n.apply(g),
                _ => 0.0,
            },
        }
    }

    /// Combined score and normalized components. A record that belongs to the
    /// calibration cache is scored leave-one-out.
    pub fn score(&self, record: &FeatureRecord) -> Result<(f64, Components)> {
        if record.feature.len() != self.index.dim() {
            return Err(Error::Epistemic(format!(
                "record `{}` has dimension {}, model expects {}",
                record.id,
                record.feature.len(),
                self.index.dim()
            )));
        }
        let w = self.bundle.weights;
        let needs_layers = w.grad > 0.0;
        if needs_layers && record.layer_features.is_none() {
            return Err(Error::Epistemic(format!(
                "record `{}` has no layer features but w_grad = {}",
                record.id, w.grad
            )));
        }
        let exclude = self.id_to_index.get(&record.id).copied();
        let raw = self.raw_components(record, exclude, self.bundle.grad_norm.is_some())?;
        let c = self.normalize(&raw);
        Ok((w.combine(&c).clamp(0.0, 1.0), c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn symmetric_neighbours_cancel() {
        let v = [1.0, 2.0];
        let a = [2.0, 3.0];
        let b = [0.0, 1.0];
        let f = support_deficiency_raw(&v, [a.as_slice(), b.as_slice()], 1.0, 1e-6);
        assert!(f <= 1e-12);
    }

    #[test]
    fn single_and_double_neighbour_force() {
        let v = [0.0, 0.0];
        let u = [1.0, 0.0];
        let one = support_deficiency_raw(&v, [u.as_slice()], 1.0, 1e-6);
        let oracle = (-1.0f64).exp() / (1.0 + 1e-6);
        assert_abs_diff_eq!(one, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(one, 0.367879, epsilon = 1e-6);
        let two = support_deficiency_raw(&v, [u.as_slice(), u.as_slice()], 1.0, 1e-6);
        assert_abs_diff_eq!(two, 2.0 * oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(two, 0.735759, epsilon = 1e-6);
    }

    #[test]
    fn coincident_neighbours_are_skipped() {
        let v = [0.0, 0.0];
        let f = support_deficiency_raw(&v, [v.as_slice()], 1.0, 1e-6);
        assert_eq!(f, 0.0);
    }

    /// H = -sum p ln p evaluated independently from the implementation.
    fn scalar_collapse(eigs: &[f64], d: usize) -> f64 {
        let s: f64 = eigs.iter().sum();
        let mut h = 0.0;
        for &l in eigs {
            let p = l / s;
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        1.0 - (h.exp() - 1.0) / (d as f64 - 1.0)
    }

    #[test]
    fn collapse_anchor_cases() {
        assert_eq!(collapse_from_eigenvalues(&[2.0; 5], 5), Some(0.0));
        assert_eq!(collapse_from_eigenvalues(&[3.0, 0.0, 0.0], 3), Some(1.0));
        let s = collapse_from_eigenvalues(&[3.0, 1.0], 2).unwrap();
        assert_abs_diff_eq!(s, 0.245235, epsilon = 1e-6);
        assert_abs_diff_eq!(s, scalar_collapse(&[3.0, 1.0], 2), epsilon = 1e-15);
        assert_eq!(collapse_from_eigenvalues(&[0.0, 0.0], 2), None);
    }

    #[test]
    fn collapse_from_rows() {
        // rows +-e_i: second moment matrix is isotropic
        let rows: Vec<Vec<f64>> = vec![
            vec![1.0, 0.0, 0.0],
            vec![-1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, -1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 0.0, -1.0],
        ];
        let r: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let (s, flagged) = geometric_collapse(&r, false).unwrap();
        assert_abs_diff_eq!(s, 0.0, epsilon = 1e-12);
        assert!(!flagged);
        // collinear rows: rank one
        let rows: Vec<Vec<f64>> = (1..5).map(|i| vec![i as f64, 2.0 * i as f64, 0.0]).collect();
        let r: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        assert_abs_diff_eq!(geometric_collapse(&r, false).unwrap().0, 1.0, epsilon = 1e-9);
        // fewer neighbours than dimensions goes through the Gram route
        let rows: Vec<Vec<f64>> = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]];
        let r: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let want = scalar_collapse(&[0.5, 0.5, 0.0, 0.0], 4);
        assert_abs_diff_eq!(geometric_collapse(&r, false).unwrap().0, want, epsilon = 1e-12);
        let zeros = [vec![0.0; 3], vec![0.0; 3]];
        let r: Vec<&[f64]> = zeros.iter().map(Vec::as_slice).collect();
        assert_eq!(geometric_collapse(&r, false).unwrap(), (1.0, true));
    }

    #[test]
    fn collapse_grows_with_anisotropy() {
        let mut prev = -1.0;
        for i in 0..20 {
            let t = i as f64 / 20.0;
            let s = collapse_from_eigenvalues(&[1.0 + t, 1.0 - t], 2).unwrap();
            assert!(s > prev, "t = {t}");
            prev = s;
        }
    }

    #[test]
    fn divergence_cases() {
        let same = vec![vec![1.0, 2.0, 3.0]; 4];
        assert_abs_diff_eq!(cross_layer_divergence(&same).unwrap(), 0.0, epsilon = 1e-15);
        let ortho = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(cross_layer_divergence(&ortho).unwrap(), 1.0);
        let diag = vec![vec![1.0, 0.0], vec![1.0, 1.0]];
        assert_abs_diff_eq!(cross_layer_divergence(&diag).unwrap(), 0.292893, epsilon = 1e-6);
        let err = cross_layer_divergence(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap_err();
        assert!(err.to_string().contains("layer 1"));
        assert!(cross_layer_divergence(&[vec![1.0]]).is_err());
        assert!(cross_layer_divergence(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn normalizer_anchors() {
        let n = MinMax::fit(&[2.0, 4.0, 3.0]);
        assert_eq!(n.apply(2.0), 0.0);
        assert_eq!(n.apply(4.0), 1.0);
        assert_eq!(n.apply(3.0), 0.5);
        assert_eq!(n.apply(10.0), 1.0);
        let d = MinMax::fit(&[1.0, 1.0]);
        assert!(d.is_degenerate());
        assert_eq!(d.apply(5.0), 0.0);
    }

    #[test]
    fn combination_examples() {
        let w = Weights::new(0.2, 0.3, 0.5).unwrap();
        let c = Components { supp: 0.5, rank: 0.2, grad: 0.8 };
        assert_abs_diff_eq!(w.combine(&c), 0.56, epsilon = 1e-12);
        let ones = Components { supp: 1.0, rank: 1.0, grad: 1.0 };
        assert_abs_diff_eq!(w.combine(&ones), 1.0, epsilon = 1e-12);
        let zeros = Components { supp: 0.0, rank: 0.0, grad: 0.0 };
        assert_eq!(w.combine(&zeros), 0.0);
        assert!(Weights::new(0.5, 0.5, 0.5).is_err());
    }

    /// Independent re-run of the grid search: enumerate, score, keep the minimum
    /// with the same near-tie rule.
    fn grid_oracle(components: &[Components], alea: &[f64]) -> Weights {
        let mut cands = Vec::new();
        for i in 0..=20 {
            for j in 0..=(20 - i) {
                let w = [i as f64 / 20.0, j as f64 / 20.0, (20 - i - j) as f64 / 20.0];
                let s: Vec<f64> = components
                    .iter()
                    .map(|c| w[0] * c.supp + w[1] * c.rank + w[2] * c.grad)
                    .collect();
                let r = pearson(&s, alea).unwrap_or(0.0).abs();
                cands.push((r, w));
            }
        }
        let best = cands.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
        let u = 1.0 / 3.0;
        let w = cands
            .iter()
            .filter(|c| c.0 <= best + 1e-9)
            .min_by(|a, b| {
                let da: f64 = a.1.iter().map(|x| (x - u).powi(2)).sum();
                let db: f64 = b.1.iter().map(|x| (x - u).powi(2)).sum();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap()
            .1;
        Weights { supp: w[0], rank: w[1], grad: w[2] }
    }

    #[test]
    fn copied_component_gets_little_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 500;
        let alea: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let comps: Vec<Components> = alea
            .iter()
            .map(|&a| Components { supp: rng.random(), rank: a, grad: rng.random() })
            .collect();
        let fit = optimize_weights(&comps, &alea, None, 0.5, true).unwrap();
        assert!(fit.weights.rank <= 0.05 + 1e-12, "{:?}", fit.weights);
        assert_eq!(fit.weights, grid_oracle(&comps, &alea));
        let sum = fit.weights.supp + fit.weights.rank + fit.weights.grad;
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn uncorrelated_components_stay_near_uniform() {
        // components exactly orthogonal to the centred aleatoric pattern
        let n = 40;
        let alea: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 0.2 } else { 0.8 }).collect();
        let comps: Vec<Components> = (0..n)
            .map(|i| {
                let pair = (i / 2) as f64;
                Components {
                    supp: (pair * 0.37).sin().abs(),
                    rank: (pair * 1.3).cos().abs(),
                    grad: ((pair * 0.11) % 1.0),
                }
            })
            .collect();
        let fit = optimize_weights(&comps, &alea, None, 0.5, true).unwrap();
        let w = fit.weights;
        for x in [w.supp, w.rank, w.grad] {
            assert!((x - 1.0 / 3.0).abs() <= 0.05 + 1e-12, "{w:?}");
        }
    }

    #[test]
    fn constant_inputs_warn() {
        let comps = vec![Components { supp: 0.5, rank: 0.1, grad: 0.2 }; 12];
        let alea: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        let fit = optimize_weights(&comps, &alea, None, 0.5, true).unwrap();
        assert_eq!(fit.warnings.len(), 3);
        assert!(optimize_weights(&comps[..5], &alea[..5], None, 0.5, true).is_err());
    }

    #[test]
    fn no_layers_means_no_grad_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let comps: Vec<Components> = (0..50)
            .map(|_| Components { supp: rng.random(), rank: rng.random(), grad: 0.0 })
            .collect();
        let alea: Vec<f64> = (0..50).map(|_| rng.random()).collect();
        let fit = optimize_weights(&comps, &alea, None, 0.5, false).unwrap();
        assert_eq!(fit.weights.grad, 0.0);
    }

    #[test]
    fn shift_labels_reward_separation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 200;
        let labels: Vec<bool> = (0..n).map(|i| i % 4 == 0).collect();
        let alea: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let comps: Vec<Components> = labels
            .iter()
            .map(|&s| Components {
                supp: rng.random(),
                rank: rng.random(),
                grad: if s { 0.9 } else { 0.1 } + 0.05 * rng.random::<f64>(),
            })
            .collect();
        let fit = optimize_weights(&comps, &alea, Some(&labels), 0.5, true).unwrap();
        assert!(fit.weights.grad >= 0.5, "{:?}", fit.weights);
        assert!(fit.separation > 0.3);
    }

    proptest::proptest! {
        #[test]
        fn support_is_translation_invariant(
            v in proptest::collection::vec(-3.0f64..3.0, 3),
            nb in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 3), 1..8),
            t in proptest::collection::vec(-50.0f64..50.0, 3),
        ) {
            let a = support_deficiency_raw(&v, nb.iter().map(Vec::as_slice), 1.0, 1e-6);
            let shift = |p: &[f64]| -> Vec<f64> { p.iter().zip(&t).map(|(x, y)| x + y).collect() };
            let moved: Vec<Vec<f64>> = nb.iter().map(|p| shift(p)).collect();
            let b = support_deficiency_raw(&shift(&v), moved.iter().map(Vec::as_slice), 1.0, 1e-6);
            proptest::prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        }

        #[test]
        fn collapse_is_rotation_invariant(
            rows in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 3), 3..12),
            angles in proptest::collection::vec(0.0f64..std::f64::consts::TAU, 3),
        ) {
            let r: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
            let (a, _) = geometric_collapse(&r, false).unwrap();
            let rot = nalgebra::Rotation3::from_euler_angles(angles[0], angles[1], angles[2]);
            let rotated: Vec<Vec<f64>> = rows
                .iter()
                .map(|p| {
                    let v = rot * nalgebra::Vector3::new(p[0], p[1], p[2]);
                    vec![v.x, v.y, v.z]
                })
                .collect();
            let r2: Vec<&[f64]> = rotated.iter().map(Vec::as_slice).collect();
            let (b, _) = geometric_collapse(&r2, false).unwrap();
            proptest::prop_assert!((a - b).abs() <= 1e-8);
        }

        #[test]
        fn combined_score_is_convex(
            c in proptest::collection::vec(0.0f64..=1.0, 3),
            i in 0usize..=20, j in 0usize..=20,
        ) {
            proptest::prop_assume!(i + j <= 20);
            let w = Weights::new(i as f64 / 20.0, j as f64 / 20.0, (20 - i - j) as f64 / 20.0).unwrap();
            let comps = Components { supp: c[0], rank: c[1], grad: c[2] };
            let s = w.combine(&comps);
            let lo = c.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            proptest::prop_assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
        }
    }
}
