//! Sample-ratio-mismatch checks along the funnel.
//!
//! Each check is a one-degree-of-freedom chi-squared goodness-of-fit test of
//! the observed arm counts against the design split.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::funnel::{Assignment, FunnelSnapshot, Stage};
use crate::num::Real;
use crate::special::chi_squared_sf;

pub const DEFAULT_ALPHA: f64 = 0.001;

/// Below this expected cell count the chi-squared approximation is not trusted.
pub const MIN_EXPECTED_COUNT: f64 = 5.0;

/// Stages scanned by [`srm_scan`], in order.
pub const SCANNED_STAGES: [Stage; 3] = [Stage::Allocated, Stage::Activated, Stage::Triggered];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SrmError {
    #[error("design ratio components must be positive and finite")]
    InvalidRatio,
    #[error("alpha must lie strictly between 0 and 1, got {0}")]
    InvalidAlpha(f64),
    #[error("cannot parse design ratio `{0}`; expected A:B")]
    Parse(String),
}

/// Design split between treatment and control, e.g. `1:1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DesignRatio<F> {
    pub treatment: F,
    pub control: F,
}

impl<F: Real> DesignRatio<F> {
    pub fn new(treatment: F, control: F) -> Result<Self, SrmError> {
        let ok = |v: F| v.is_finite() && v > F::zero();
        if ok(treatment) && ok(control) {
            Ok(Self { treatment, control })
        } else {
            Err(SrmError::InvalidRatio)
        }
    }

    pub fn even() -> Self {
        Self {
            treatment: F::one(),
            control: F::one(),
        }
    }

    /// Expected share of the treatment arm.
    pub fn treatment_share(&self) -> F {
        self.treatment / (self.treatment + self.control)
    }
}

impl<F: Real> Default for DesignRatio<F> {
    fn default() -> Self {
        Self::even()
    }
}

impl<F: Real> FromStr for DesignRatio<F> {
    type Err = SrmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse_err = || SrmError::Parse(s.to_string());
        let (a, b) = s.split_once(':').ok_or_else(parse_err)?;
        let a: f64 = a.trim().parse().map_err(|_| parse_err())?;
        let b: f64 = b.trim().parse().map_err(|_| parse_err())?;
        Self::new(F::lit(a), F::lit(b))
    }
}

impl<F: Real> fmt::Display for DesignRatio<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.treatment, self.control)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    Fail,
    NotApplicable,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::NotApplicable => "not-applicable",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SrmResult<F> {
    /// Set by [`srm_scan`]; `None` for a standalone test.
    pub stage: Option<Stage>,
    /// `[treatment, control]`.
    pub observed: [u64; 2],
    pub expected_ratio: [F; 2],
    pub chi2: F,
    pub p_value: F,
    pub verdict: Verdict,
    pub alpha: F,
}

fn check_alpha<F: Real>(alpha: F) -> Result<(), SrmError> {
    if alpha > F::zero() && alpha < F::one() {
        Ok(())
    } else {
        Err(SrmError::InvalidAlpha(alpha.as_f64()))
    }
}

pub fn srm_test<F: Real>(
    n_treatment: u64,
    n_control: u64,
    ratio: DesignRatio<F>,
    alpha: F,
) -> Result<SrmResult<F>, SrmError> {
    let ratio = DesignRatio::new(ratio.treatment, ratio.control)?;
    check_alpha(alpha)?;

    let total = F::lit((n_treatment + n_control) as f64);
    let share = ratio.treatment_share();
    let expected = [total * share, total * (F::one() - share)];
    let observed = [n_treatment, n_control];

    let mut result = SrmResult {
        stage: None,
        observed,
        expected_ratio: [ratio.treatment, ratio.control],
        chi2: F::zero(),
        p_value: F::one(),
        verdict: Verdict::NotApplicable,
        alpha,
    };
    if n_treatment + n_control == 0 {
        return Ok(result);
    }

    let chi2 = observed
        .iter()
        .zip(expected)
        .map(|(&o, e)| {
            let diff = F::lit(o as f64) - e;
            diff * diff / e
        })
        .fold(F::zero(), |acc, term| acc + term);
    result.chi2 = chi2;
    result.p_value = chi_squared_sf(chi2, 1).max(F::zero()).min(F::one());

    let min_expected = F::lit(MIN_EXPECTED_COUNT);
    result.verdict = if expected.iter().any(|&e| e < min_expected) {
        Verdict::NotApplicable
    } else if result.p_value < alpha {
        Verdict::Fail
    } else {
        Verdict::Pass
    };
    Ok(result)
}

/// One result per stage in [`SCANNED_STAGES`].
///
/// Activation is not applicable when the control arm logged no activation
/// at all, which is how one-sided configuration delivery shows up.
pub fn srm_scan<F: Real>(
    snapshot: &FunnelSnapshot<F>,
    ratio: DesignRatio<F>,
    alpha: F,
) -> Result<Vec<SrmResult<F>>, SrmError> {
    let counts = snapshot.counts();
    SCANNED_STAGES
        .iter()
        .map(|&stage| {
            let arms = counts.arm_counts(stage).expect("scanned stages carry arm counts");
            let mut result = srm_test(
                arms.get(Assignment::Treatment),
                arms.get(Assignment::Control),
                ratio,
                alpha,
            )?;
            result.stage = Some(stage);
            if stage == Stage::Activated && arms.control == 0 {
                result.verdict = Verdict::NotApplicable;
            }
            Ok(result)
        })
        .collect()
}
