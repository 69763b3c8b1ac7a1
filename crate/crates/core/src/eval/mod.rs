//! Evaluation metrics, the gating ablation and synthetic data.

pub mod synth;

use serde::{Deserialize, Serialize};

use crate::controller::{decide, Action, ControllerConfig};
use crate::error::{Error, Result};
use crate::trace::{simulate_fixed, ActionSet, SimulationResult, Trace};

pub use synth::{generate_synth, generate_trace, Cluster, Segment, SynthConfig, SynthData, TraceSynthConfig};

pub const DEFAULT_BINS: usize = 10;

/// Sample Pearson correlation; errors when it is undefined.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Eval(format!(
            "pearson needs two equal-length inputs of length >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    crate::stats::pearson(x, y)
        .ok_or_else(|| Error::Eval("pearson undefined for a constant input".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub center: f64,
    /// `None` for empty bins.
    pub mean: Option<f64>,
    pub count: usize,
}

/// Mean of `y` over equal-width bins of `x` on `[0, 1]`. Values outside the
/// range land in the edge bins.
pub fn binned_mean(x: &[f64], y: &[f64], n_bins: usize) -> Result<Vec<Bin>> {
    if n_bins < 2 {
        return Err(Error::Eval("binned_mean needs at least 2 bins".into()));
    }
    if x.len() != y.len() {
        return Err(Error::Eval("binned_mean inputs differ in length".into()));
    }
    let mut sums = vec![(0.0, 0usize); n_bins];
    for (&xi, &yi) in x.iter().zip(y) {
        let b = ((xi * n_bins as f64).floor().max(0.0) as usize).min(n_bins - 1);
        sums[b].0 += yi;
        sums[b].1 += 1;
    }
    Ok(sums
        .iter()
        .enumerate()
        .map(|(i, &(s, c))| Bin {
            center: (i as f64 + 0.5) / n_bins as f64,
            mean: (c > 0).then(|| s / c as f64),
            count: c,
        })
        .collect())
}

/// `1 - mean active params / params(largest tier)`.
pub fn compute_savings(result: &SimulationResult, actions: &ActionSet) -> Result<f64> {
    if result.outcomes.is_empty() {
        return Err(Error::Eval("no frames to compute savings over".into()));
    }
    let mut total = 0.0;
    for o in &result.outcomes {
        total += actions
            .params_of(&o.action)
            .ok_or_else(|| Error::Eval(format!("unknown action label `{}`", o.action)))?;
    }
    let mean = total / result.outcomes.len() as f64;
    Ok(1.0 - mean / actions.params[actions.largest()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    /// Largest allowed drop of mean IoU below always running `escalate_to`.
    pub max_iou_drop: f64,
    pub base: String,
    pub escalate_to: String,
    /// Threshold grid resolution per axis.
    pub grid: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            max_iou_drop: 0.01,
            base: "nano".into(),
            escalate_to: "xlarge".into(),
            grid: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub savings: f64,
    pub mean_iou: f64,
    pub escalation_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub reference_iou: f64,
    pub decomposed_thresholds: ControllerConfig,
    pub decomposed: GateOutcome,
    pub total_threshold: f64,
    pub total: GateOutcome,
    /// Total-uncertainty gate escalating the same number of frames as the
    /// decomposed gate, whatever its quality.
    pub total_at_decomposed_budget: GateOutcome,
}

/// Per-frame IoU of the base and escalation tiers, for fast threshold sweeps.
struct GateTable {
    base_iou: Vec<f64>,
    up_iou: Vec<f64>,
    base_params: f64,
    up_params: f64,
    largest_params: f64,
}

impl GateTable {
    fn new(trace: &Trace, actions: &ActionSet, base: usize, up: usize) -> Result<Self> {
        trace.require_models(&[&actions.labels[base], &actions.labels[up]])?;
        let col = |a: usize| trace.frames().iter().map(|f| f.per_model[&actions.labels[a]].iou).collect();
        Ok(GateTable {
            base_iou: col(base),
            up_iou: col(up),
            base_params: actions.params[base],
            up_params: actions.params[up],
            largest_params: actions.params[actions.largest()],
        })
    }

    fn outcome(&self, escalate: impl Iterator<Item = bool>) -> GateOutcome {
        let n = self.base_iou.len();
        let (mut iou, mut k) = (0.0, 0usize);
        for (i, e) in escalate.enumerate() {
            if e {
                iou += self.up_iou[i];
                k += 1;
            } else {
                iou += self.base_iou[i];
            }
        }
        let rate = k as f64 / n as f64;
        let mean_params = self.base_params + rate * (self.up_params - self.base_params);
        GateOutcome {
            savings: 1.0 - mean_params / self.largest_params,
            mean_iou: iou / n as f64,
            escalation_rate: rate,
        }
    }
}

fn better(candidate: &GateOutcome, best: &Option<(GateOutcome, f64, f64)>) -> bool {
    match best {
        None => true,
        Some((b, ..)) => {
            candidate.savings > b.savings
                || (candidate.savings == b.savings && candidate.mean_iou > b.mean_iou)
        }
    }
}

/// Compares decomposed threshold gating against gating on the total
/// uncertainty `sqrt(s_a^2 + s_e^2)`. Each scheme takes its most economical
/// thresholds whose mean IoU stays within `max_iou_drop` of always running
/// the escalation tier.
pub fn gate_ablation(trace: &Trace, actions: &ActionSet, cfg: &AblationConfig) -> Result<AblationResult> {
    actions.validate()?;
    if cfg.grid < 1 || !(cfg.max_iou_drop >= 0.0) {
        return Err(Error::Eval("ablation needs grid >= 1 and a non-negative IoU bound".into()));
    }
    let base = actions.resolve(&cfg.base)?;
    let up = actions.resolve(&cfg.escalate_to)?;
    let reference_iou = simulate_fixed(trace, actions, up)?.mean_iou;
    let floor = reference_iou - cfg.max_iou_drop;
    let grid: Vec<f64> = (0..=cfg.grid).map(|i| i as f64 / cfg.grid as f64).collect();
    let table = GateTable::new(trace, actions, base, up)?;

    let mut dec_best: Option<(GateOutcome, f64, f64)> = None;
    for &ta in &grid {
        for &te in &grid {
            let c = ControllerConfig { tau_alea: ta, tau_epis: te };
            let esc = trace
                .frames()
                .iter()
                .map(|f| decide(f.sigma_alea, f.sigma_epis, &c).action == Action::Escalate);
            let o = table.outcome(esc);
            if o.mean_iou >= floor - 1e-12 && better(&o, &dec_best) {
                dec_best = Some((o, ta, te));
            }
        }
    }
    let total: Vec<f64> = trace
        .frames()
        .iter()
        .map(|f| f.sigma_alea.hypot(f.sigma_epis))
        .collect();
    let mut tot_best: Option<(GateOutcome, f64, f64)> = None;
    for &t in &grid {
        let t = t * std::f64::consts::SQRT_2;
        let o = table.outcome(total.iter().map(|&u| u > t));
        if o.mean_iou >= floor - 1e-12 && better(&o, &tot_best) {
            tot_best = Some((o, t, 0.0));
        }
    }
    let (Some((decomposed, ta, te)), Some((total_outcome, tt, _))) = (dec_best, tot_best) else {
        return Err(Error::Eval(format!(
            "no threshold meets the IoU bound {} below the reference {reference_iou:.4}",
            cfg.max_iou_drop
        )));
    };
    // same escalation count for the total gate: escalate its k largest totals
    let k = (decomposed.escalation_rate * trace.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..trace.len()).collect();
    order.sort_by(|&a, &b| total[b].total_cmp(&total[a]).then(a.cmp(&b)));
    let mut esc = vec![false; trace.len()];
    for &i in order.iter().take(k) {
        esc[i] = true;
    }
    let budget = table.outcome(esc.into_iter());
    Ok(AblationResult {
        reference_iou,
        decomposed_thresholds: ControllerConfig { tau_alea: ta, tau_epis: te },
        decomposed,
        total_threshold: tt,
        total: total_outcome,
        total_at_decomposed_budget: budget,
    })
}

/// Summary document written by `simulate` and `report`. Fields that do not
/// apply to a run are omitted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pearson_alea_epis: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pearson_alea_conformity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_width: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compute_savings: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub switch_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_params: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub per_bin_conformity: Vec<Bin>,
}

impl MetricsReport {
    pub fn from_simulation(result: &SimulationResult, actions: &ActionSet) -> Result<Self> {
        Ok(MetricsReport {
            compute_savings: Some(compute_savings(result, actions)?),
            switch_rate: Some(result.switch_rate),
            mean_iou: Some(result.mean_iou),
            mean_params: Some(result.mean_params),
            ..MetricsReport::default()
        })
    }
}
