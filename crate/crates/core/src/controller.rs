//! Threshold controller: escalate only when epistemic uncertainty is high and
//! aleatoric uncertainty is not.
//!
//! | regime          | condition                         | action   |
//! |-----------------|-----------------------------------|----------|
//! | `epis_dominant` | `s_e > tau_e` and `s_a <= tau_a`  | escalate |
//! | `alea_dominant` | `s_a > tau_a` and `s_e <= tau_e`  | keep     |
//! | `both_high`     | `s_e > tau_e` and `s_a > tau_a`   | keep, flagged ambiguous |
//! | `low_low`       | otherwise                         | keep     |
//!
//! There is no de-escalation rule; downward moves come from the learned policy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{median, order_statistic, sorted};

pub const DEFAULT_TAU_EPIS: f64 = 0.6;
pub const DEFAULT_TAU_ALEA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub tau_alea: f64,
    pub tau_epis: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            tau_alea: DEFAULT_TAU_ALEA,
            tau_epis: DEFAULT_TAU_EPIS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    LowLow,
    EpisDominant,
    AleaDominant,
    BothHigh,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::LowLow => "low_low",
            Regime::EpisDominant => "epis_dominant",
            Regime::AleaDominant => "alea_dominant",
            Regime::BothHigh => "both_high",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Keep,
    Escalate,
}

impl Action {
    pub fn as_str(&self) -> &'static str {
        match self {
            Action::Keep => "keep",
            Action::Escalate => "escalate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub action: Action,
    pub ambiguous: bool,
    pub regime: Regime,
}

pub fn decide(sigma_alea: f64, sigma_epis: f64, config: &ControllerConfig) -> Decision {
    let epis_high = sigma_epis > config.tau_epis;
    let alea_high = sigma_alea > config.tau_alea;
    let regime = match (epis_high, alea_high) {
        (true, false) => Regime::EpisDominant,
        (false, true) => Regime::AleaDominant,
        (true, true) => Regime::BothHigh,
        (false, false) => Regime::LowLow,
    };
    Decision {
        action: if regime == Regime::EpisDominant {
            Action::Escalate
        } else {
            Action::Keep
        },
        ambiguous: regime == Regime::BothHigh,
        regime,
    }
}

/// Thresholds from calibration scores: `tau_epis` is the
/// `ceil((1 - rate) n)`-th order statistic of `sigma_epis`, `tau_alea` the median
/// of `sigma_alea`.
pub fn calibrate_thresholds(
    sigma_alea: &[f64],
    sigma_epis: &[f64],
    target_escalation_rate: f64,
) -> Result<ControllerConfig> {
    if !(target_escalation_rate > 0.0 && target_escalation_rate < 1.0) {
        return Err(Error::Controller(format!(
            "target escalation rate {target_escalation_rate} outside (0, 1)"
        )));
    }
    if sigma_epis.is_empty() || sigma_alea.is_empty() {
        return Err(Error::Controller("no calibration scores".into()));
    }
    let s = sorted(sigma_epis);
    if s[0] == s[s.len() - 1] {
        return Err(Error::Controller(
            "sigma_epis is constant; thresholds are undefined".into(),
        ));
    }
    let n = s.len();
    let x = (1.0 - target_escalation_rate) * n as f64;
    let rank = (x - 1e-9 * x.max(1.0)).ceil().max(1.0) as usize;
    Ok(ControllerConfig {
        tau_alea: median(sigma_alea),
        tau_epis: order_statistic(&s, rank),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const CFG: ControllerConfig = ControllerConfig {
        tau_alea: 0.5,
        tau_epis: 0.6,
    };

    #[test]
    fn rule_examples() {
        let d = decide(0.2, 0.8, &CFG);
        assert_eq!((d.action, d.regime), (Action::Escalate, Regime::EpisDominant));
        let d = decide(0.9, 0.3, &CFG);
        assert_eq!((d.action, d.regime), (Action::Keep, Regime::AleaDominant));
        let d = decide(0.9, 0.9, &CFG);
        assert_eq!((d.action, d.ambiguous), (Action::Keep, true));
        let d = decide(0.1, 0.1, &CFG);
        assert_eq!(d.regime, Regime::LowLow);
        // boundaries comply
        assert_eq!(decide(0.5, 0.6, &CFG).regime, Regime::LowLow);
    }

    #[test]
    fn threshold_calibration() {
        let epis: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        let alea = vec![0.1, 0.2, 0.3];
        let c = calibrate_thresholds(&alea, &epis, 0.1).unwrap();
        assert_eq!(c.tau_epis, 0.8);
        assert_eq!(c.tau_alea, 0.2);
        let escalated = epis.iter().filter(|&&e| e > c.tau_epis).count();
        assert_eq!(escalated, 1);
        let c = calibrate_thresholds(&alea, &epis, 0.999).unwrap();
        assert_eq!(c.tau_epis, 0.0);
        assert!(calibrate_thresholds(&alea, &[0.4; 10], 0.1).is_err());
        assert!(calibrate_thresholds(&alea, &epis, 1.0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn regimes_partition_and_invariants(
            sa in 0.0f64..=1.0, se in 0.0f64..=1.0,
            ta in 0.0f64..=1.0, te in 0.0f64..=1.0,
        ) {
            let cfg = ControllerConfig { tau_alea: ta, tau_epis: te };
            let d = decide(sa, se, &cfg);
            let hits = [
                se > te && sa <= ta,
                sa > ta && se <= te,
                se > te && sa > ta,
                se <= te && sa <= ta,
            ];
            proptest::prop_assert_eq!(hits.iter().filter(|&&h| h).count(), 1);
            proptest::prop_assert_eq!(d.action == Action::Escalate, d.regime == Regime::EpisDominant);
            proptest::prop_assert_eq!(d.ambiguous, d.regime == Regime::BothHigh);
        }

        #[test]
        fn monotone_in_epistemic(
            sa in 0.0f64..=0.5, se in 0.0f64..=1.0, bump in 0.0f64..=1.0,
            sa2 in 0.0f64..=0.5,
        ) {
            let d = decide(sa, se, &CFG);
            let up = decide(sa, (se + bump).min(1.0), &CFG);
            if d.action == Action::Escalate {
                proptest::prop_assert_eq!(up.action, Action::Escalate);
            }
            // below tau_alea the aleatoric value does not matter
            proptest::prop_assert_eq!(decide(sa2, se, &CFG).action, d.action);
        }
    }
}
