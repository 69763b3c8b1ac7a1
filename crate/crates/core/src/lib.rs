//! Uncertainty decomposition, conformal intervals and uncertainty-gated model
//! selection over cached detection features.
//!
//! The pipeline runs over [`FeatureStore`] records:
//!
//! * [`aleatoric::DensityModel`] scores how far a feature lies from the
//!   calibration density (irreducible, data-side uncertainty).
//! * [`epistemic::EpistemicModel`] combines neighbourhood support, local
//!   spectral collapse and cross-layer disagreement (model-side uncertainty).
//! * [`conformal::CalibrationModel`] turns both into prediction intervals on
//!   the conformity target `y = 1 - IoU`.
//! * [`controller`] and [`policy`] use the uncertainty pair to pick a detector
//!   tier per frame; [`trace`] replays those choices over logged traces.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aleatoric;
pub mod cli;
pub mod conformal;
pub mod controller;
pub mod epistemic;
pub mod error;
pub mod eval;
pub mod feature_store;
pub mod pipeline;
pub mod policy;
pub mod stats;
pub mod trace;

pub use error::{Error, ErrorClass, Result};
pub use feature_store::{FeatureRecord, FeatureStore, ModelBundle};
