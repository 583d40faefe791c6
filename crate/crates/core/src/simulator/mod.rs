//! Synthetic imperfect experiments with known ground truth.
//!
//! A scenario plants any combination of the classic funnel imperfections:
//! a skewed allocated population (via per-group shares), one-sided
//! activation failure that may share a latent cause with the outcome,
//! trigger dilution, and non-compliance among triggered treatment units.
//!
//! Every unit draws from its own ChaCha8 stream (stream number = unit
//! index), so a unit's fate does not depend on generation order or on how
//! many threads produced the log.

mod generate;
mod truth;

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use generate::{naive_activated_comparison, sample_unit, simulate, SimOutput, SimUnit, UnitSampler};
pub use truth::{expected_naive_activated, ground_truth, GroundTruth};

/// `prob_control` value meaning control-arm activation is never logged.
pub const CONTROL_NOT_LOGGED: f64 = -1.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub name: String,
    /// Share of the targeted population.
    pub share: f64,
    pub trigger_prob: f64,
    pub base_outcome_mean: f64,
    pub base_outcome_sd: f64,
    /// Additive shift for triggered treatment-arm units.
    pub itt_effect: f64,
    /// Additional shift realized only by units that play.
    pub play_effect: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationFailure {
    /// Treatment units whose latent connectivity falls below this quantile
    /// fail to activate.
    pub prob_treatment: f64,
    /// Same for control, or [`CONTROL_NOT_LOGGED`].
    pub prob_control: f64,
    /// Outcome shift `-c` for every unit below the treatment failure
    /// quantile, in both arms.
    pub outcome_confounding: f64,
}

impl Default for ActivationFailure {
    fn default() -> Self {
        Self {
            prob_treatment: 0.0,
            prob_control: 0.0,
            outcome_confounding: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScenario {
    pub seed: u64,
    pub n_targeted: u64,
    pub allocation_prob: f64,
    /// Treatment : control weights.
    pub arm_split: [f64; 2],
    pub groups: Vec<GroupSpec>,
    #[serde(default)]
    pub activation_failure: ActivationFailure,
    /// Probability that a triggered, activated treatment unit plays.
    pub compliance_prob: f64,
}

fn unit_interval(what: &str, value: f64) -> Result<(), SimError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(SimError::Invalid(format!("{what} must lie in [0, 1], got {value}")))
    }
}

impl SimScenario {
    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let scenario: SimScenario = toml::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, SimError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_targeted == 0 {
            return Err(SimError::Invalid("n_targeted must be positive".into()));
        }
        unit_interval("allocation_prob", self.allocation_prob)?;
        unit_interval("compliance_prob", self.compliance_prob)?;
        if !self.arm_split.iter().all(|w| w.is_finite() && *w > 0.0) {
            return Err(SimError::Invalid("arm_split components must be positive".into()));
        }
        let failure = &self.activation_failure;
        unit_interval("activation_failure.prob_treatment", failure.prob_treatment)?;
        if failure.prob_control != CONTROL_NOT_LOGGED {
            unit_interval("activation_failure.prob_control", failure.prob_control)?;
        }
        if !(failure.outcome_confounding >= 0.0 && failure.outcome_confounding.is_finite()) {
            return Err(SimError::Invalid("outcome_confounding must be non-negative".into()));
        }

        if self.groups.is_empty() {
            return Err(SimError::Invalid("at least one group is required".into()));
        }
        let mut names = HashSet::new();
        for g in &self.groups {
            if !names.insert(g.name.as_str()) {
                return Err(SimError::Invalid(format!("duplicate group `{}`", g.name)));
            }
            unit_interval(&format!("groups.{}.share", g.name), g.share)?;
            unit_interval(&format!("groups.{}.trigger_prob", g.name), g.trigger_prob)?;
            if !(g.base_outcome_sd > 0.0 && g.base_outcome_sd.is_finite()) {
                return Err(SimError::Invalid(format!("groups.{}.base_outcome_sd must be positive", g.name)));
            }
            if ![g.base_outcome_mean, g.itt_effect, g.play_effect].iter().all(|v| v.is_finite()) {
                return Err(SimError::Invalid(format!("groups.{} has a non-finite value", g.name)));
            }
        }
        let total: f64 = self.groups.iter().map(|g| g.share).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(SimError::Invalid(format!("group shares sum to {total}, not 1")));
        }
        Ok(())
    }

    pub fn treatment_share(&self) -> f64 {
        self.arm_split[0] / (self.arm_split[0] + self.arm_split[1])
    }

    pub fn control_activation_logged(&self) -> bool {
        self.activation_failure.prob_control != CONTROL_NOT_LOGGED
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}
