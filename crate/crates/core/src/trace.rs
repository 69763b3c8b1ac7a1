//! Logged detection traces and their replay under model-selection rules.
//!
//! A trace holds, per frame, the IoU and predicted conformity of every model
//! tier plus the frame's uncertainty pair. Because every tier is logged, the
//! outcome of any selection rule can be replayed offline.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controller::{decide, Action, ControllerConfig, Decision};
use crate::error::{Error, Result};

pub const MODEL_LABELS: [&str; 5] = ["nano", "small", "medium", "large", "xlarge"];
/// Parameter counts in millions.
pub const DEFAULT_PARAMS: [f64; 5] = [3.2, 11.2, 25.9, 43.7, 68.2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub iou: f64,
    pub y_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFrame {
    pub sequence: String,
    pub frame: u64,
    pub per_model: BTreeMap<String, ModelOutput>,
    pub sigma_alea: f64,
    pub sigma_epis: f64,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    /// `[W, H]` in pixels.
    pub frame_size: [f64; 2],
}

impl TraceFrame {
    fn validate(&self) -> std::result::Result<(), String> {
        for (name, v) in [("sigma_alea", self.sigma_alea), ("sigma_epis", self.sigma_epis)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if self.per_model.is_empty() {
            return Err("no per-model outputs".into());
        }
        for (m, out) in &self.per_model {
            if !(0.0..=1.0).contains(&out.iou) {
                return Err(format!("model `{m}` iou {} outside [0, 1]", out.iou));
            }
            if !out.y_hat.is_finite() {
                return Err(format!("model `{m}` y_hat is not finite"));
            }
        }
        if self.bbox.iter().any(|v| !v.is_finite()) || self.bbox[2] < 0.0 || self.bbox[3] < 0.0 {
            return Err("bbox must be finite with non-negative size".into());
        }
        if self.frame_size.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err("frame_size must be positive".into());
        }
        Ok(())
    }
}

/// Frames grouped into episodes, one per sequence, ordered by frame index.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    frames: Vec<TraceFrame>,
    episodes: Vec<Range<usize>>,
}

impl Trace {
    /// Sequences keep their order of first appearance; frames within a
    /// sequence are sorted by frame index.
    pub fn from_frames(frames: Vec<TraceFrame>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Trace("trace has no frames".into()));
        }
        let mut order: HashMap<String, usize> = HashMap::new();
        for f in &frames {
            f.validate()
                .map_err(|m| Error::Trace(format!("frame {}:{}: {m}", f.sequence, f.frame)))?;
            let next = order.len();
            order.entry(f.sequence.clone()).or_insert(next);
        }
        let mut frames = frames;
        frames.sort_by_key(|f| (order[&f.sequence], f.frame));
        let mut episodes = Vec::new();
        let mut start = 0;
        for i in 1..=frames.len() {
            if i == frames.len() || frames[i].sequence != frames[start].sequence {
                episodes.push(start..i);
                start = i;
            } else if frames[i].frame == frames[i - 1].frame {
                return Err(Error::Trace(format!(
                    "duplicate frame {}:{}",
                    frames[i].sequence, frames[i].frame
                )));
            }
        }
        Ok(Trace { frames, episodes })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut frames = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let f: TraceFrame = serde_json::from_str(&line).map_err(|e| {
                Error::Trace(format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            frames.push(f);
        }
        Self::from_frames(frames)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for f in &self.frames {
            serde_json::to_writer(&mut w, f)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn frames(&self) -> &[TraceFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &[TraceFrame]> {
        self.episodes.iter().map(|r| &self.frames[r.clone()])
    }

    pub fn episode_ranges(&self) -> &[Range<usize>] {
        &self.episodes
    }

    /// Errors unless every frame logs every listed model.
    pub fn require_models<S: AsRef<str>>(&self, labels: &[S]) -> Result<()> {
        for f in &self.frames {
            for l in labels {
                if !f.per_model.contains_key(l.as_ref()) {
                    return Err(Error::Trace(format!(
                        "frame {}:{} has no IoU for model `{}`",
                        f.sequence,
                        f.frame,
                        l.as_ref()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Ordered model tiers, smallest first, with parameter counts in millions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActionSet {
    pub labels: Vec<String>,
    pub params: Vec<f64>,
}

impl Default for ActionSet {
    fn default() -> Self {
        ActionSet {
            labels: MODEL_LABELS.iter().map(|s| s.to_string()).collect(),
            params: DEFAULT_PARAMS.to_vec(),
        }
    }
}

impl ActionSet {
    pub fn validate(&self) -> Result<()> {
        if self.labels.len() < 2 || self.labels.len() != self.params.len() {
            return Err(Error::Config(
                "action set needs at least two tiers with one parameter count each".into(),
            ));
        }
        if self.params[0] <= 0.0 || self.params.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config(
                "tier parameter counts must be positive and strictly increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn largest(&self) -> usize {
        self.labels.len() - 1
    }

    /// `params(a) / params(largest)`
    pub fn relative_capacity(&self, a: usize) -> f64 {
        self.params[a] / self.params[self.largest()]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn params_of(&self, label: &str) -> Option<f64> {
        self.index_of(label).map(|i| self.params[i])
    }

    /// Index of `label`, or a config error naming it.
    pub fn resolve(&self, label: &str) -> Result<usize> {
        self.index_of(label)
            .ok_or_else(|| Error::Config(format!("unknown model tier `{label}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameOutcome {
    pub sequence: String,
    pub frame: u64,
    pub action: String,
    pub iou: f64,
    pub sigma_alea: f64,
    pub sigma_epis: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub outcomes: Vec<FrameOutcome>,
    /// Frames whose action differs from the previous frame of the same sequence.
    pub switches: usize,
    pub switch_rate: f64,
    pub mean_iou: f64,
    /// Mean active parameters in millions.
    pub mean_params: f64,
}

impl SimulationResult {
    /// Replay per-frame tier choices (indices into `actions`) over `trace`.
    pub fn from_choices(trace: &Trace, actions: &ActionSet, choices: &[usize]) -> Result<Self> {
        assert_eq!(choices.len(), trace.len());
        let mut outcomes = Vec::with_capacity(trace.len());
        let mut switches = 0;
        let (mut iou_sum, mut params_sum) = (0.0, 0.0);
        for range in trace.episode_ranges() {
            for i in range.clone() {
                let f = &trace.frames[i];
                let a = choices[i];
                let label = &actions.labels[a];
                let out = f.per_model.get(label).ok_or_else(|| {
                    Error::Trace(format!(
                        "frame {}:{} has no IoU for model `{label}`",
                        f.sequence, f.frame
                    ))
                })?;
                if i > range.start && choices[i - 1] != a {
                    switches += 1;
                }
                iou_sum += out.iou;
                params_sum += actions.params[a];
                outcomes.push(FrameOutcome {
                    sequence: f.sequence.clone(),
                    frame: f.frame,
                    action: label.clone(),
                    iou: out.iou,
                    sigma_alea: f.sigma_alea,
                    sigma_epis: f.sigma_epis,
                });
            }
        }
        let n = trace.len() as f64;
        Ok(SimulationResult {
            outcomes,
            switches,
            switch_rate: switches as f64 / n,
            mean_iou: iou_sum / n,
            mean_params: params_sum / n,
        })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        for o in &self.outcomes {
            w.serialize(o)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Always run one tier.
pub fn simulate_fixed(trace: &Trace, actions: &ActionSet, tier: usize) -> Result<SimulationResult> {
    SimulationResult::from_choices(trace, actions, &vec![tier; trace.len()])
}

/// Threshold gating: each frame runs `base` unless the controller escalates,
/// in which case that frame runs `escalate_to`.
pub fn simulate_thresholds(
    trace: &Trace,
    actions: &ActionSet,
    config: &ControllerConfig,
    base: usize,
    escalate_to: usize,
) -> Result<(SimulationResult, Vec<Decision>)> {
    let decisions: Vec<Decision> = trace
        .frames
        .iter()
        .map(|f| decide(f.sigma_alea, f.sigma_epis, config))
        .collect();
    let choices: Vec<usize> = decisions
        .iter()
        .map(|d| match d.action {
            Action::Escalate => escalate_to,
            Action::Keep => base,
        })
        .collect();
    Ok((SimulationResult::from_choices(trace, actions, &choices)?, decisions))
}

/// Decision log: `frame, sigma_alea, sigma_epis, regime, action`.
pub fn write_decisions_csv(path: impl AsRef<Path>, trace: &Trace, decisions: &[Decision]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["frame", "sigma_alea", "sigma_epis", "regime", "action"])?;
    for (f, d) in trace.frames.iter().zip(decisions) {
        w.write_record([
            f.frame.to_string(),
            f.sigma_alea.to_string(),
            f.sigma_epis.to_string(),
            d.regime.as_str().to_string(),
            d.action.as_str().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn frame(seq: &str, t: u64, ious: [f64; 5], sa: f64, se: f64) -> TraceFrame {
        TraceFrame {
            sequence: seq.into(),
            frame: t,
            per_model: MODEL_LABELS
                .iter()
                .zip(ious)
                .map(|(l, iou)| (l.to_string(), ModelOutput { iou, y_hat: 1.0 - iou }))
                .collect(),
            sigma_alea: sa,
            sigma_epis: se,
            bbox: [10.0, 10.0, 20.0, 20.0],
            frame_size: [100.0, 100.0],
        }
    }

    #[test]
    fn groups_and_sorts_episodes() {
        let t = Trace::from_frames(vec![
            frame("b", 2, [0.5; 5], 0.1, 0.1),
            frame("a", 1, [0.5; 5], 0.1, 0.1),
            frame("b", 1, [0.5; 5], 0.1, 0.1),
        ])
        .unwrap();
        let eps: Vec<Vec<(String, u64)>> = t
            .episodes()
            .map(|e| e.iter().map(|f| (f.sequence.clone(), f.frame)).collect())
            .collect();
        assert_eq!(
            eps,
            vec![
                vec![("b".to_string(), 1), ("b".to_string(), 2)],
                vec![("a".to_string(), 1)]
            ]
        );
    }

    #[test]
    fn rejects_bad_frames() {
        assert!(Trace::from_frames(vec![]).is_err());
        assert!(Trace::from_frames(vec![frame("a", 0, [1.5; 5], 0.1, 0.1)]).is_err());
        assert!(Trace::from_frames(vec![frame("a", 0, [0.5; 5], 1.1, 0.1)]).is_err());
        let dup = vec![frame("a", 0, [0.5; 5], 0.1, 0.1), frame("a", 0, [0.5; 5], 0.1, 0.1)];
        assert!(Trace::from_frames(dup).is_err());
        let mut missing = frame("a", 0, [0.5; 5], 0.1, 0.1);
        missing.per_model.remove("large");
        let t = Trace::from_frames(vec![missing]).unwrap();
        let err = t.require_models(&MODEL_LABELS).unwrap_err().to_string();
        assert!(err.contains("large"), "{err}");
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trace.jsonl");
        let t = Trace::from_frames(vec![
            frame("a", 0, [0.1, 0.2, 0.3, 0.4, 0.5], 0.25, 0.75),
            frame("a", 1, [0.3; 5], 0.0, 1.0),
        ])
        .unwrap();
        t.save(&p).unwrap();
        assert_eq!(Trace::load(&p).unwrap(), t);
    }

    #[test]
    fn action_costs() {
        let a = ActionSet::default();
        a.validate().unwrap();
        assert_eq!(a.relative_capacity(4), 1.0);
        assert!((a.relative_capacity(0) - 3.2 / 68.2).abs() < 1e-15);
        let bad = ActionSet {
            params: vec![1.0, 1.0],
            labels: vec!["a".into(), "b".into()],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn switches_count_within_sequences() {
        let frames = vec![
            frame("a", 0, [0.5; 5], 0.1, 0.1),
            frame("a", 1, [0.5; 5], 0.1, 0.9),
            frame("a", 2, [0.5; 5], 0.1, 0.1),
            frame("b", 0, [0.5; 5], 0.1, 0.1),
        ];
        let t = Trace::from_frames(frames).unwrap();
        let acts = ActionSet::default();
        let (r, d) = simulate_thresholds(&t, &acts, &ControllerConfig::default(), 0, 4).unwrap();
        assert_eq!(d[1].action, Action::Escalate);
        let labels: Vec<&str> = r.outcomes.iter().map(|o| o.action.as_str()).collect();
        assert_eq!(labels, vec!["nano", "xlarge", "nano", "nano"]);
        assert_eq!(r.switches, 2);
        // a frame starting a new sequence is not a switch even if the tier changes
        let r = SimulationResult::from_choices(&t, &acts, &[0, 0, 0, 4]).unwrap();
        assert_eq!(r.switches, 0);
    }

    #[test]
    fn unreachable_threshold_never_escalates() {
        let frames: Vec<TraceFrame> = (0..20)
            .map(|i| frame("a", i, [0.5; 5], 0.0, i as f64 / 19.0))
            .collect();
        let t = Trace::from_frames(frames).unwrap();
        let cfg = ControllerConfig { tau_alea: 0.5, tau_epis: 1.0 };
        let (r, d) = simulate_thresholds(&t, &ActionSet::default(), &cfg, 0, 4).unwrap();
        assert!(d.iter().all(|d| d.action == Action::Keep));
        assert!((r.mean_params - 3.2).abs() < 1e-12);
    }

    #[test]
    fn decisions_csv_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let t = Trace::from_frames(vec![frame("a", 7, [0.5; 5], 0.2, 0.8)]).unwrap();
        let (_, d) = simulate_thresholds(&t, &ActionSet::default(), &ControllerConfig::default(), 0, 4).unwrap();
        write_decisions_csv(&p, &t, &d).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "frame,sigma_alea,sigma_epis,regime,action\n7,0.2,0.8,epis_dominant,escalate\n");
    }
}
