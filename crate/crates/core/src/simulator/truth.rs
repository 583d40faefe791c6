//! Closed-form expectations for a scenario, computed without simulation.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{SimError, SimScenario};
use crate::estimators::{GroupTable, RateKind};
use crate::funnel::FunnelRates;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroundTruth {
    pub true_itt_triggered: f64,
    pub true_itt_allocation_ref: f64,
    pub true_itt_target_ref: f64,
    pub true_play_effect: f64,
    /// ITT over the whole allocated population (trigger-diluted).
    pub true_total_effect: f64,
    pub expected_rates: FunnelRates<f64>,
    /// `None` when some group never triggers.
    pub expected_trigger_table: Option<GroupTable<f64>>,
    /// `None` when the propensity is 0 or 1.
    pub expected_propensity_table: Option<GroupTable<f64>>,
}

/// Per-group ITT among triggered units. Activation failure only removes the
/// play component; the confounding shift hits both arms alike.
fn group_itt(s: &SimScenario, g: usize) -> f64 {
    let spec = &s.groups[g];
    let activation = 1.0 - s.activation_failure.prob_treatment;
    spec.itt_effect + activation * s.compliance_prob * spec.play_effect
}

/// `P(g | triggered)` for every group.
fn triggered_mix(s: &SimScenario) -> Vec<f64> {
    let raw: Vec<f64> = s.groups.iter().map(|g| g.share * g.trigger_prob).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|r| if total > 0.0 { r / total } else { 0.0 }).collect()
}

pub fn ground_truth(s: &SimScenario) -> Result<GroundTruth, SimError> {
    s.validate()?;
    let n = s.groups.len();
    let mix = triggered_mix(s);
    let taus: Vec<f64> = (0..n).map(|g| group_itt(s, g)).collect();

    let true_itt_triggered = (0..n).map(|g| mix[g] * taus[g]).sum();
    // allocation does not depend on group, so allocated and targeted mixes coincide
    let true_itt_allocation_ref: f64 = (0..n).map(|g| s.groups[g].share * taus[g]).sum();
    let true_total_effect = (0..n).map(|g| s.groups[g].share * s.groups[g].trigger_prob * taus[g]).sum();
    let true_play_effect = (0..n).map(|g| mix[g] * s.groups[g].play_effect).sum();

    let share_t = s.treatment_share();
    let fail_t = s.activation_failure.prob_treatment;
    let control_activation = if s.control_activation_logged() {
        1.0 - s.activation_failure.prob_control
    } else {
        0.0
    };
    let trigger_rate: f64 = s.groups.iter().map(|g| g.share * g.trigger_prob).sum();
    let expected_rates = FunnelRates {
        allocation_rate: Some(s.allocation_prob),
        activation_rate: Some(share_t * (1.0 - fail_t) + (1.0 - share_t) * control_activation),
        trigger_rate: Some(trigger_rate),
        compliance_rate: Some((1.0 - fail_t) * s.compliance_prob),
    };

    let by_group = |f: &dyn Fn(&super::GroupSpec) -> f64| -> BTreeMap<String, f64> {
        s.groups.iter().map(|g| (g.name.clone(), f(g))).collect()
    };
    let expected_trigger_table = GroupTable::new(RateKind::TRIGGER, by_group(&|g| g.trigger_prob)).ok();
    let propensity = share_t * (1.0 - fail_t) * s.compliance_prob;
    let expected_propensity_table = GroupTable::new(RateKind::Propensity, by_group(&|_| propensity)).ok();

    Ok(GroundTruth {
        true_itt_triggered,
        true_itt_allocation_ref,
        true_itt_target_ref: true_itt_allocation_ref,
        true_play_effect,
        true_total_effect,
        expected_rates,
        expected_trigger_table,
        expected_propensity_table,
    })
}

/// Expected value of the naive activated-only comparison.
///
/// Activated treatment units sit above the failure quantile, so they carry
/// no confounding shift and every one of them gets the compliance-weighted
/// play effect; triggered controls carry a `-c` shift with probability
/// equal to the failure share.
pub fn expected_naive_activated(s: &SimScenario) -> Result<f64, SimError> {
    s.validate()?;
    let mix = triggered_mix(s);
    let failure = &s.activation_failure;
    let treated_mean_shift: f64 = s
        .groups
        .iter()
        .zip(&mix)
        .map(|(g, m)| m * (g.itt_effect + s.compliance_prob * g.play_effect))
        .sum();
    Ok(treated_mean_shift + failure.prob_treatment * failure.outcome_confounding)
}
