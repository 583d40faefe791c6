//! Effect estimators over a reconciled funnel.
//!
//! * [`itt_triggered`]: difference in means among triggered units, including
//!   triggered units that never activated.
//! * [`itt_reweighted`] / [`itt_reference`]: the same comparison with unit
//!   weights `T'(g) / T(g)` that move the triggered group mix to a reference
//!   mix, each arm normalized by its own sum of weights.
//! * [`ipw_play_effect`]: inverse-propensity contrast of players against
//!   non-players, pooled over both arms of the triggered population.
//!
//! Confidence intervals are normal-theory at ±1.96 standard errors.

mod ipw;
mod itt;
mod power;
mod tables;

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::funnel::{Assignment, Stage};
use crate::num::Real;

pub use ipw::{estimate_play_propensity, estimate_play_propensity_with, ipw_play_effect};
pub use itt::{itt_reference, itt_reweighted, itt_triggered, welch_difference, Reference};
pub use power::power_at_treated_n;
pub use tables::{compose_triggered_mix, estimate_group_rates, estimate_group_rates_with, GroupTable, RateKind};

/// Normal quantile used for the reported 95% interval.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error("{} has too few triggered units", .arm.map_or("triggered population".to_string(), |a| format!("{a} arm")))]
    EmptyArm { arm: Option<Assignment> },
    #[error("group `{group}` is missing from the rate table")]
    MissingGroup { group: String },
    #[error("group `{group}` has a degenerate rate (no units reach the later stage)")]
    DegenerateRate { group: String },
    #[error("group `{group}` has a propensity of exactly 0 or 1")]
    DegeneratePropensity { group: String },
    #[error("target reference needs targeted-stage events or per-group target counts")]
    MissingTargetData,
    #[error("{from} does not precede {to} in the funnel")]
    InvalidStagePair { from: Stage, to: Stage },
    #[error("group keys differ between tables: {0}")]
    KeyMismatch(String),
    #[error("table value for group `{group}` is out of range: {value}")]
    InvalidTableValue { group: String, value: String },
    #[error("{0}")]
    Domain(String),
}

impl EstimateError {
    pub(crate) fn empty(arm: Assignment) -> Self {
        EstimateError::EmptyArm { arm: Some(arm) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    IttTriggered,
    IttReweighted,
    IttAllocationRef,
    IttTargetRef,
    PlayEffectIpw,
    /// Treatment activated-and-triggered units against all triggered
    /// controls. Biased whenever activation failure is related to outcome.
    NaiveActivated,
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimand::IttTriggered => "itt_triggered",
            Estimand::IttReweighted => "itt_reweighted",
            Estimand::IttAllocationRef => "itt_allocation_ref",
            Estimand::IttTargetRef => "itt_target_ref",
            Estimand::PlayEffectIpw => "play_effect_ipw",
            Estimand::NaiveActivated => "naive_activated",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EffectEstimate<F> {
    pub estimand: Estimand,
    pub point: F,
    pub std_error: F,
    pub ci_95: [F; 2],
    /// `[treatment, control]`: unit counts, or sums of weights for the
    /// reweighted estimands.
    pub n_effective: [F; 2],
    pub diagnostics: BTreeMap<String, F>,
}

impl<F: Real> EffectEstimate<F> {
    pub fn new(estimand: Estimand, point: F, std_error: F, n_effective: [F; 2]) -> Self {
        let half_width = F::lit(Z_95) * std_error;
        Self {
            estimand,
            point,
            std_error,
            ci_95: [point - half_width, point + half_width],
            n_effective,
            diagnostics: BTreeMap::new(),
        }
    }

    pub fn with_diagnostic(mut self, key: &str, value: F) -> Self {
        self.diagnostics.insert(key.to_string(), value);
        self
    }

    pub fn covers(&self, value: F) -> bool {
        self.ci_95[0] <= value && value <= self.ci_95[1]
    }
}
