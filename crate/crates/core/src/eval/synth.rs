//! Seeded synthetic data: feature stores with known structure and detection
//! traces with planted uncertainty segments.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{BBox, FeatureRecord, FeatureStore};
use crate::trace::{ModelOutput, Trace, TraceFrame, MODEL_LABELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Per-axis standard deviations.
    pub std: Vec<f64>,
    /// Conformity `y` of a record at the cluster centre.
    pub base: f64,
    /// Standard deviation of the additive noise on `y`.
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n: usize,
    pub d: usize,
    pub clusters: Vec<Cluster>,
    pub shift_fraction: f64,
    /// Displacement of shifted records along the first axis, in units of the
    /// cluster's first-axis standard deviation.
    pub shift_offset: f64,
    /// Added to `y` per unit of shift offset; shifted records are detected worse.
    pub shift_gain: f64,
    /// Layer vectors per record; 0 disables layer features.
    pub layers: usize,
    /// Rotation per layer step in the plane of the first two axes (radians).
    pub layer_rotation: f64,
    /// Extra rotation per layer step for shifted records.
    pub shift_rotation: f64,
    /// Noise added to layer `l` scales as `layer_noise * l`.
    pub layer_noise: f64,
    pub track_len: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 2000,
            d: 8,
            clusters: vec![
                Cluster {
                    weight: 0.5,
                    mean: vec![0.0; 8],
                    std: vec![1.0; 8],
                    base: 0.2,
                    noise: 0.03,
                },
                Cluster {
                    weight: 0.5,
                    mean: {
                        let mut m = vec![0.0; 8];
                        m[1] = 6.0;
                        m
                    },
                    std: vec![1.0; 8],
                    base: 0.4,
                    noise: 0.12,
                },
            ],
            shift_fraction: 0.0,
            shift_offset: 10.0,
            shift_gain: 0.02,
            layers: 4,
            layer_rotation: 0.15,
            shift_rotation: 0.3,
            layer_noise: 0.05,
            track_len: 10,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Two isotropic clusters in `d` dimensions with different noise levels.
    pub fn two_cluster(n: usize, d: usize, seed: u64) -> Self {
        let base = SynthConfig::default();
        let clusters = base
            .clusters
            .iter()
            .map(|c| {
                let mut mean = vec![0.0; d];
                mean[1.min(d - 1)] = c.mean[1];
                Cluster {
                    mean,
                    std: vec![1.0; d],
                    ..c.clone()
                }
            })
            .collect();
        SynthConfig {
            n,
            d,
            clusters,
            seed,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Eval(format!("synth config: {m}")));
        if self.n == 0 || self.d == 0 {
            return bad("n and d must be positive".into());
        }
        if self.clusters.is_empty() {
            return bad("at least one cluster required".into());
        }
        let total: f64 = self.clusters.iter().map(|c| c.weight).sum();
        if self.clusters.iter().any(|c| !(c.weight >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return bad(format!("mixture weights must be non-negative and sum to 1, got {total}"));
        }
        for (i, c) in self.clusters.iter().enumerate() {
            if c.mean.len() != self.d || c.std.len() != self.d {
                return bad(format!("cluster {i} mean/std length differs from d = {}", self.d));
            }
            if c.std.iter().any(|s| !(*s > 0.0)) || !(c.noise >= 0.0) {
                return bad(format!("cluster {i} has a non-positive spread"));
            }
        }
        if !(0.0..=1.0).contains(&self.shift_fraction) {
            return bad("shift fraction must lie in [0, 1]".into());
        }
        if self.layers == 1 {
            return bad("layer features need at least 2 layers".into());
        }
        if self.layers > 0 && self.d < 2 {
            return bad("layer rotations need d >= 2".into());
        }
        if self.track_len == 0 {
            return bad("track_len must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub store: FeatureStore,
    /// Ground-truth conformity, equal to `1 - iou` of each record.
    pub y: Vec<f64>,
    pub shifted: Vec<bool>,
    pub cluster: Vec<usize>,
}

fn rotate(v: &[f64], angle: f64) -> Vec<f64> {
    let mut out = v.to_vec();
    let (s, c) = angle.sin_cos();
    out[0] = c * v[0] - s * v[1];
    out[1] = s * v[0] + c * v[1];
    out
}

/// Gaussian-mixture records with conformity `y = base + gain * offset + noise`
/// clipped to `[0, 1]`, and `confidence = 1 - base` so that the predicted
/// conformity is the cluster base. Ids are `synth:<track>:<frame>`.
pub fn generate_synth(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let weights: Vec<f64> = cfg.clusters.iter().map(|c| c.weight).collect();
    let mixture = rand_distr::weighted::WeightedIndex::new(&weights)
        .map_err(|e| Error::Eval(format!("synth config: {e}")))?;
    let mut records = Vec::with_capacity(cfg.n);
    let (mut y, mut shifted, mut cluster) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..cfg.n {
        let k = mixture.sample(&mut rng);
        let c = &cfg.clusters[k];
        let is_shifted = rng.random::<f64>() < cfg.shift_fraction;
        let mut feature: Vec<f64> = (0..cfg.d)
            .map(|j| c.mean[j] + c.std[j] * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut target = c.base + c.noise * rng.sample::<f64, _>(StandardNormal);
        if is_shifted {
            feature[0] += cfg.shift_offset * c.std[0];
            target += cfg.shift_gain * cfg.shift_offset;
        }
        let target = target.clamp(0.0, 1.0);
        let layer_features = (cfg.layers > 0).then(|| {
            let step = cfg.layer_rotation + if is_shifted { cfg.shift_rotation } else { 0.0 };
            (0..cfg.layers)
                .map(|l| {
                    let mut v = rotate(&feature, step * l as f64);
                    for x in &mut v {
                        *x += cfg.layer_noise * l as f64 * rng.sample::<f64, _>(StandardNormal);
                    }
                    v
                })
                .collect()
        });
        let (track, frame) = (i / cfg.track_len, i % cfg.track_len);
        records.push(FeatureRecord {
            id: format!("synth:{track}:{frame}"),
            sequence: format!("synth:{track}"),
            frame: frame as u64,
            model_id: "synthetic".into(),
            bbox: BBox {
                x: 0.0,
                y: 0.0,
                w: 1.0,
                h: 1.0,
            },
            feature,
            layer_features,
            iou: Some(1.0 - target),
            confidence: Some((1.0 - c.base).clamp(0.0, 1.0)),
        });
        y.push(target);
        shifted.push(is_shifted);
        cluster.push(k);
    }
    Ok(SynthData {
        store: FeatureStore::from_records(records)?,
        y,
        shifted,
        cluster,
    })
}

/// Per-tier IoU levels of each segment type in a synthetic trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceSynthConfig {
    pub sequences: usize,
    pub frames_per_sequence: usize,
    /// Epistemic segments per sequence: high `sigma_epis`, only the two
    /// largest tiers keep their IoU.
    pub epis_segments: usize,
    /// Aleatoric segments per sequence: high `sigma_alea`, every tier degrades
    /// equally.
    pub alea_segments: usize,
    pub segment_len: (usize, usize),
    pub iou_clean: f64,
    pub iou_epis_small: f64,
    pub iou_alea: f64,
    /// Standard deviation of per-frame IoU jitter shared by all tiers.
    pub iou_jitter: f64,
    pub low_sigma: (f64, f64),
    pub high_sigma: (f64, f64),
    pub seed: u64,
}

impl Default for TraceSynthConfig {
    fn default() -> Self {
        TraceSynthConfig {
            sequences: 4,
            frames_per_sequence: 200,
            epis_segments: 2,
            alea_segments: 3,
            segment_len: (10, 20),
            iou_clean: 0.8,
            iou_epis_small: 0.3,
            iou_alea: 0.4,
            iou_jitter: 0.02,
            low_sigma: (0.05, 0.4),
            high_sigma: (0.7, 0.95),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Clean,
    Epistemic,
    Aleatoric,
}

/// Trace frames with planted segments; returns the segment label per frame
/// in trace order.
pub fn generate_trace(cfg: &TraceSynthConfig) -> Result<(Trace, Vec<Segment>)> {
    let (lo, hi) = cfg.segment_len;
    if cfg.sequences == 0 || cfg.frames_per_sequence == 0 || lo == 0 || hi < lo {
        return Err(Error::Eval("trace synth: empty trace or bad segment length".into()));
    }
    let segs = cfg.epis_segments + cfg.alea_segments;
    if segs * (hi + 1) > cfg.frames_per_sequence {
        return Err(Error::Eval("trace synth: segments do not fit in a sequence".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut frames = Vec::new();
    let mut labels = Vec::new();
    for s in 0..cfg.sequences {
        let mut kinds: Vec<Segment> = std::iter::repeat_n(Segment::Epistemic, cfg.epis_segments)
            .chain(std::iter::repeat_n(Segment::Aleatoric, cfg.alea_segments))
            .collect();
        kinds.shuffle(&mut rng);
        let lens: Vec<usize> = kinds.iter().map(|_| rng.random_range(lo..=hi)).collect();
        // distribute the clean frames into segs + 1 gaps, each inner gap >= 1
        let clean = cfg.frames_per_sequence - lens.iter().sum::<usize>();
        let mut cuts: Vec<usize> = (0..segs).map(|_| rng.random_range(0..=clean - segs)).collect();
        cuts.sort_unstable();
        let mut plan = vec![Segment::Clean; cfg.frames_per_sequence];
        let mut pos = 0;
        let mut prev_cut = 0;
        for (i, (&kind, &len)) in kinds.iter().zip(&lens).enumerate() {
            pos += cuts[i] - prev_cut + usize::from(i > 0);
            prev_cut = cuts[i];
            for p in plan.iter_mut().skip(pos).take(len) {
                *p = kind;
            }
            pos += len;
        }
        let mut box_x: f64 = rng.random_range(100.0..1500.0);
        for (t, &kind) in plan.iter().enumerate() {
            let sa_low = rng.random_range(cfg.low_sigma.0..cfg.low_sigma.1);
            let se_low = rng.random_range(cfg.low_sigma.0..cfg.low_sigma.1);
            let high = rng.random_range(cfg.high_sigma.0..cfg.high_sigma.1);
            let (sa, se) = match kind {
                Segment::Clean => (sa_low, se_low),
                Segment::Epistemic => (sa_low, high),
                Segment::Aleatoric => (high, se_low),
            };
            let jitter = cfg.iou_jitter * rng.sample::<f64, _>(StandardNormal);
            let per_model = MODEL_LABELS
                .iter()
                .enumerate()
                .map(|(a, label)| {
                    let base = match kind {
                        Segment::Clean => cfg.iou_clean,
                        Segment::Epistemic if a + 2 < MODEL_LABELS.len() => cfg.iou_epis_small,
                        Segment::Epistemic => cfg.iou_clean,
                        Segment::Aleatoric => cfg.iou_alea,
                    };
                    let iou = (base + jitter).clamp(0.0, 1.0);
                    let y_hat = (1.0 - iou + 0.05 * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0);
                    (label.to_string(), ModelOutput { iou, y_hat })
                })
                .collect();
            box_x = (box_x + rng.random_range(-5.0..5.0)).clamp(0.0, 1800.0);
            frames.push(TraceFrame {
                sequence: format!("seq{s:02}"),
                frame: t as u64,
                per_model,
                sigma_alea: sa,
                sigma_epis: se,
                bbox: [box_x, 400.0, 80.0, 160.0],
                frame_size: [1920.0, 1080.0],
            });
            labels.push(kind);
        }
    }
    Ok((Trace::from_frames(frames)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aleatoric::DensityModel;

    #[test]
    fn no_shift_means_no_labels() {
        let d = generate_synth(&SynthConfig { n: 200, ..SynthConfig::default() }).unwrap();
        assert!(d.shifted.iter().all(|s| !s));
        assert_eq!(d.store.len(), 200);
        assert!(d.store.has_layer_features());
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = SynthConfig { n: 100, shift_fraction: 0.2, ..SynthConfig::default() };
        let a = generate_synth(&cfg).unwrap();
        let b = generate_synth(&cfg).unwrap();
        assert_eq!(a.store.records(), b.store.records());
        assert_eq!(a.y, b.y);
        let c = generate_synth(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn rejects_bad_mixture() {
        let mut cfg = SynthConfig::default();
        cfg.clusters[0].weight = 0.7;
        assert!(generate_synth(&cfg).is_err());
    }

    #[test]
    fn shifted_records_are_far_in_mahalanobis_distance() {
        // one unit-variance cluster in d = 2, offset 10 sigma
        let cfg = SynthConfig {
            n: 3000,
            d: 2,
            clusters: vec![Cluster {
                weight: 1.0,
                mean: vec![0.0, 0.0],
                std: vec![1.0, 1.0],
                base: 0.2,
                noise: 0.05,
            }],
            shift_fraction: 0.1,
            shift_offset: 10.0,
            layers: 0,
            ..SynthConfig::default()
        };
        let data = generate_synth(&cfg).unwrap();
        let clean: Vec<&[f64]> = data
            .store
            .records()
            .iter()
            .zip(&data.shifted)
            .filter(|(_, s)| !**s)
            .map(|(r, _)| r.feature.as_slice())
            .collect();
        let model = DensityModel::fit(clean.iter().copied(), 1e-4).unwrap();
        let mean_m = |want: bool| {
            let ms: Vec<f64> = data
                .store
                .records()
                .iter()
                .zip(&data.shifted)
                .filter(|(_, s)| **s == want)
                .map(|(r, _)| model.mahalanobis(&r.feature).unwrap())
                .collect();
            ms.iter().sum::<f64>() / ms.len() as f64
        };
        // clean records sit near E|z| = sqrt(pi/2) ~ 1.25 in d = 2, shifted ones near 10
        assert!(mean_m(true) > 5.0 * mean_m(false));
    }

    #[test]
    fn trace_segments_have_planted_structure() {
        let cfg = TraceSynthConfig::default();
        let (trace, labels) = generate_trace(&cfg).unwrap();
        assert_eq!(trace.len(), 800);
        for (f, l) in trace.frames().iter().zip(&labels) {
            let nano = f.per_model["nano"].iou;
            let large = f.per_model["large"].iou;
            match l {
                Segment::Epistemic => {
                    assert!(f.sigma_epis > 0.6 && f.sigma_alea < 0.5);
                    assert!(large - nano > 0.4);
                }
                Segment::Aleatoric => {
                    assert!(f.sigma_alea > 0.5 && f.sigma_epis < 0.6);
                    assert_eq!(nano, large);
                }
                Segment::Clean => assert_eq!(nano, f.per_model["xlarge"].iou),
            }
        }
        let epis = labels.iter().filter(|l| **l == Segment::Epistemic).count();
        assert!(epis >= 4 * 2 * 10);
        let again = generate_trace(&cfg).unwrap();
        assert_eq!(again.0, trace);
    }
}
