use std::collections::BTreeMap;

use super::{EffectEstimate, EstimateError, Estimand, GroupTable, RateKind};
use crate::funnel::{Assignment, FunnelSnapshot, Stage};
use crate::num::Real;

/// Share of triggered units in each group that played, pooled across arms.
///
/// Exact 0 or 1 is an error rather than being clipped.
pub fn estimate_play_propensity<F: Real>(snapshot: &FunnelSnapshot<F>) -> Result<GroupTable<F>, EstimateError> {
    estimate_play_propensity_with(snapshot, false)
}

/// As [`estimate_play_propensity`], optionally with add-one smoothing.
pub fn estimate_play_propensity_with<F: Real>(
    snapshot: &FunnelSnapshot<F>,
    add_one: bool,
) -> Result<GroupTable<F>, EstimateError> {
    let mut tallies: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for unit in snapshot.units_at(Stage::Triggered) {
        let entry = tallies.entry(unit.group.clone()).or_default();
        entry.1 += 1;
        if unit.played {
            entry.0 += 1;
        }
    }
    let mut values = BTreeMap::new();
    for (group, (played, total)) in tallies {
        let p = if add_one {
            F::lit((played + 1) as f64) / F::lit((total + 2) as f64)
        } else {
            if played == 0 || played == total {
                return Err(EstimateError::DegeneratePropensity { group });
            }
            F::lit(played as f64) / F::lit(total as f64)
        };
        values.insert(group, p);
    }
    GroupTable::new(RateKind::Propensity, values)
}

/// Inverse-propensity contrast between players and non-players among all
/// triggered units:
///
/// `(1/N) Σ [ w·y / p(g) − (1 − w)·y / (1 − p(g)) ]`
///
/// with `N` the triggered count over both arms. Control units never play,
/// so they enter the non-player term. The standard error is the sample
/// standard deviation of the summands over `√N`.
pub fn ipw_play_effect<F: Real>(
    snapshot: &FunnelSnapshot<F>,
    propensity: &GroupTable<F>,
) -> Result<EffectEstimate<F>, EstimateError> {
    let mut terms = Vec::new();
    let mut arm_totals = [0usize; 2];
    let mut arm_players = [0usize; 2];
    let mut min_p = F::infinity();
    let mut max_p = F::neg_infinity();
    let mut max_unit_weight = F::zero();
    let mut imputed = 0usize;

    for unit in snapshot.units_at(Stage::Triggered) {
        let p = *propensity.lookup(&unit.group)?;
        if !(p > F::zero() && p < F::one()) {
            return Err(EstimateError::DegeneratePropensity {
                group: unit.group.clone(),
            });
        }
        min_p = min_p.min(p);
        max_p = max_p.max(p);
        let y = unit.outcome_or_zero();
        let weight = if unit.played { p.recip() } else { (F::one() - p).recip() };
        max_unit_weight = max_unit_weight.max(weight);
        terms.push(if unit.played { y * weight } else { -(y * weight) });

        if let Some(arm) = unit.assignment {
            arm_totals[arm.index()] += 1;
            if unit.played {
                arm_players[arm.index()] += 1;
            }
        }
        if unit.outcome.is_none() {
            imputed += 1;
        }
    }
    if terms.len() < 2 {
        return Err(EstimateError::EmptyArm { arm: None });
    }

    let n = F::count(terms.len());
    let point = terms.iter().fold(F::zero(), |a, &t| a + t) / n;
    let ss = terms.iter().fold(F::zero(), |a, &t| a + (t - point) * (t - point));
    let sd = (ss / (n - F::one())).sqrt();

    let share = |arm: Assignment| {
        let total = arm_totals[arm.index()];
        if total == 0 {
            F::nan()
        } else {
            F::count(arm_players[arm.index()]) / F::count(total)
        }
    };
    Ok(EffectEstimate::new(
        Estimand::PlayEffectIpw,
        point,
        sd / n.sqrt(),
        [
            F::count(arm_totals[Assignment::Treatment.index()]),
            F::count(arm_totals[Assignment::Control.index()]),
        ],
    )
    .with_diagnostic("min_propensity", min_p)
    .with_diagnostic("max_propensity", max_p)
    .with_diagnostic("max_unit_weight", max_unit_weight)
    .with_diagnostic("player_share_treatment", share(Assignment::Treatment))
    .with_diagnostic("player_share_control", share(Assignment::Control))
    .with_diagnostic("imputed_outcomes", F::count(imputed)))
}
