//! End-to-end fitting and scoring: density, epistemic and calibration models
//! composed over one calibration store.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::aleatoric::{DensityModel, DEFAULT_LAMBDA};
use crate::conformal::{CalPoint, CalibrationModel, CalibrationOptions, PredictionInterval};
use crate::epistemic::{Components, EpistemicConfig, EpistemicModel, WeightFit, Weights};
use crate::error::{Error, Result};
use crate::feature_store::{FeatureRecord, FeatureStore, ModelBundle, BUNDLE_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub lambda: f64,
    pub epistemic: EpistemicConfig,
    /// Skip the weight search and use these weights.
    pub weights: Option<Weights>,
    pub calibration: CalibrationOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            lambda: DEFAULT_LAMBDA,
            epistemic: EpistemicConfig::default(),
            weights: None,
            calibration: CalibrationOptions::default(),
        }
    }
}

/// Point predictions of the conformity `1 - IoU`, keyed by record id. Records
/// without an entry fall back to `1 - confidence`.
pub type Predictions = HashMap<String, f64>;

pub fn predicted_conformity(record: &FeatureRecord, predictions: Option<&Predictions>) -> Result<f64> {
    predictions
        .and_then(|p| p.get(&record.id).copied())
        .or_else(|| record.predicted_conformity())
        .ok_or_else(|| {
            Error::Store(format!(
                "record `{}` has no prediction and no confidence to derive one",
                record.id
            ))
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordScore {
    pub id: String,
    pub mahalanobis: f64,
    pub sigma_alea: f64,
    pub sigma_epis: f64,
    pub components: Components,
}

/// Scores records with fitted density and epistemic models.
#[derive(Debug, Clone)]
pub struct Scorer {
    pub density: DensityModel,
    pub epistemic: EpistemicModel,
}

impl Scorer {
    /// Rebuilds the scorer from a bundle and the calibration store it was fitted on.
    pub fn from_bundle(bundle: &ModelBundle, calibration: &FeatureStore) -> Result<Self> {
        Ok(Scorer {
            density: bundle.density.clone(),
            epistemic: EpistemicModel::from_bundle(bundle.epistemic.clone(), calibration)?,
        })
    }

    pub fn score(&self, record: &FeatureRecord) -> Result<RecordScore> {
        let m = self.density.mahalanobis(&record.feature)?;
        let sigma_alea = self.density.normalize(m)?;
        let (sigma_epis, components) = self.epistemic.score(record)?;
        Ok(RecordScore {
            id: record.id.clone(),
            mahalanobis: m,
            sigma_alea,
            sigma_epis,
            components,
        })
    }

    pub fn score_store(&self, store: &FeatureStore) -> Result<Vec<RecordScore>> {
        store.records().iter().map(|r| self.score(r)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Fitted {
    pub bundle: ModelBundle,
    pub scorer: Scorer,
    /// Calibration records scored as during fitting (epistemic leave-one-out).
    pub calibration_scores: Vec<RecordScore>,
    pub weight_fit: Option<WeightFit>,
}

/// Fits density, epistemic weights and the calibration layer on `calibration`.
/// Records need an IoU label and a prediction.
pub fn fit(
    calibration: &FeatureStore,
    predictions: Option<&Predictions>,
    shift_labels: Option<&[bool]>,
    cfg: &PipelineConfig,
) -> Result<Fitted> {
    let density = DensityModel::fit(calibration.records().iter().map(|r| r.feature.as_slice()), cfg.lambda)?;
    let mut ms = Vec::with_capacity(calibration.len());
    let mut alea = Vec::with_capacity(calibration.len());
    for r in calibration.records() {
        let m = density.mahalanobis(&r.feature)?;
        ms.push(m);
        alea.push(density.normalize(m)?);
    }
    let ep = EpistemicModel::fit(
        calibration,
        &alea,
        cfg.epistemic.clone(),
        shift_labels,
        cfg.weights,
    )?;
    let mut points = Vec::with_capacity(calibration.len());
    for (i, r) in calibration.records().iter().enumerate() {
        let y = r.conformity().ok_or_else(|| {
            Error::Store(format!("calibration record `{}` has no iou label", r.id))
        })?;
        points.push(CalPoint {
            feature: &r.feature,
            y,
            y_hat: predicted_conformity(r, predictions)?,
            sigma_alea: alea[i],
            sigma_epis: ep.scores[i],
        });
    }
    let calibration_model = CalibrationModel::fit(&points, cfg.calibration)?;
    let calibration_scores = calibration
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| RecordScore {
            id: r.id.clone(),
            mahalanobis: ms[i],
            sigma_alea: alea[i],
            sigma_epis: ep.scores[i],
            components: ep.components[i],
        })
        .collect();
    let bundle = ModelBundle {
        version: BUNDLE_VERSION,
        density: density.clone(),
        epistemic: ep.model.bundle().clone(),
        calibration: calibration_model,
    };
    Ok(Fitted {
        bundle,
        scorer: Scorer {
            density,
            epistemic: ep.model,
        },
        calibration_scores,
        weight_fit: ep.weight_fit,
    })
}

/// Locally adaptive interval for a scored record.
pub fn interval(
    model: &CalibrationModel,
    record: &FeatureRecord,
    score: &RecordScore,
    y_hat: f64,
) -> PredictionInterval {
    model.predict_interval(&record.feature, y_hat, score.sigma_alea, score.sigma_epis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{generate_synth, SynthConfig};
    use crate::feature_store::{SplitMode, SplitSpec};

    #[test]
    fn fitted_bundle_round_trips_through_scoring() {
        let data = generate_synth(&SynthConfig { n: 400, ..SynthConfig::default() }).unwrap();
        let (cal, test) = data
            .store
            .split(&SplitSpec { mode: SplitMode::ByFraction, fraction: 0.5, seed: 3 })
            .unwrap();
        let fitted = fit(&cal, None, None, &PipelineConfig::default()).unwrap();
        let w = fitted.bundle.epistemic.weights;
        assert!((w.supp + w.rank + w.grad - 1.0).abs() < 1e-12);
        assert!(fitted.bundle.calibration.q_global > 0.0);
        // a scorer rebuilt from the bundle reproduces the calibration scores exactly
        let rebuilt = Scorer::from_bundle(&fitted.bundle, &cal).unwrap();
        let again = rebuilt.score_store(&cal).unwrap();
        assert_eq!(again, fitted.calibration_scores);
        // aleatoric scores of the calibration records reach both anchors
        let lo = again.iter().map(|s| s.sigma_alea).fold(f64::INFINITY, f64::min);
        let hi = again.iter().map(|s| s.sigma_alea).fold(0.0, f64::max);
        assert!(lo <= 1e-9 && (hi - 1.0).abs() <= 1e-9, "{lo} {hi}");
        for s in rebuilt.score_store(&test).unwrap() {
            assert!((0.0..=1.0).contains(&s.sigma_alea) && (0.0..=1.0).contains(&s.sigma_epis));
        }
    }

    #[test]
    fn forced_grad_weight_without_layers_names_epistemic() {
        let cfg = SynthConfig { n: 100, layers: 0, ..SynthConfig::default() };
        let data = generate_synth(&cfg).unwrap();
        let pc = PipelineConfig {
            weights: Some(Weights::new(0.2, 0.2, 0.6).unwrap()),
            ..PipelineConfig::default()
        };
        let err = fit(&data.store, None, None, &pc).unwrap_err();
        assert!(matches!(err, Error::Epistemic(_)), "{err}");
        assert!(err.to_string().starts_with("epistemic"));
    }

    #[test]
    fn explicit_predictions_override_confidence() {
        let data = generate_synth(&SynthConfig { n: 50, ..SynthConfig::default() }).unwrap();
        let r = &data.store.records()[0];
        let p: Predictions = [(r.id.clone(), 0.42)].into_iter().collect();
        assert_eq!(predicted_conformity(r, Some(&p)).unwrap(), 0.42);
        assert_eq!(predicted_conformity(r, None).unwrap(), 1.0 - r.confidence.unwrap());
    }
}
