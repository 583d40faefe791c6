use super::{EffectEstimate, EstimateError, Estimand, GroupTable, RateKind};
use crate::estimators::tables::estimate_group_rates;
use crate::funnel::{Assignment, FunnelSnapshot, Stage, UnitState};
use crate::num::Real;

/// Reference mix for [`itt_reference`].
#[derive(Clone, Debug, PartialEq)]
pub enum Reference<F> {
    /// Group mix of the allocated population (`T' ≡ 1`).
    Allocation,
    /// Group mix of the targeted population.
    Target,
    /// An arbitrary hypothetical trigger-rate table `T'`.
    Custom(GroupTable<F>),
}

fn mean_and_var<F: Real>(values: &[F]) -> (F, F) {
    let n = F::count(values.len());
    let mean = values.iter().copied().fold(F::zero(), |a, v| a + v) / n;
    let ss = values
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .fold(F::zero(), |a, v| a + v);
    (mean, ss / (n - F::one()))
}

/// Difference of means with the unpooled (Welch) standard error.
///
/// Both samples need at least two values.
pub fn welch_difference<F: Real>(treatment: &[F], control: &[F]) -> Result<(F, F), EstimateError> {
    if treatment.len() < 2 {
        return Err(EstimateError::empty(Assignment::Treatment));
    }
    if control.len() < 2 {
        return Err(EstimateError::empty(Assignment::Control));
    }
    let (mt, vt) = mean_and_var(treatment);
    let (mc, vc) = mean_and_var(control);
    let se = (vt / F::count(treatment.len()) + vc / F::count(control.len())).sqrt();
    Ok((mt - mc, se))
}

fn triggered_by_arm<F: Real>(snapshot: &FunnelSnapshot<F>) -> [Vec<&UnitState<F>>; 2] {
    let mut arms: [Vec<&UnitState<F>>; 2] = [Vec::new(), Vec::new()];
    for unit in snapshot.units_at(Stage::Triggered) {
        if let Some(arm) = unit.assignment {
            arms[arm.index()].push(unit);
        }
    }
    arms
}

fn imputed<F: Real>(units: &[&UnitState<F>]) -> F {
    F::count(units.iter().filter(|u| u.outcome.is_none()).count())
}

/// Difference in mean outcome between triggered treatment and triggered
/// control units, activated or not.
pub fn itt_triggered<F: Real>(snapshot: &FunnelSnapshot<F>) -> Result<EffectEstimate<F>, EstimateError> {
    let [treatment, control] = triggered_by_arm(snapshot);
    let yt: Vec<F> = treatment.iter().map(|u| u.outcome_or_zero()).collect();
    let yc: Vec<F> = control.iter().map(|u| u.outcome_or_zero()).collect();
    let (point, se) = welch_difference(&yt, &yc)?;
    Ok(EffectEstimate::new(
        Estimand::IttTriggered,
        point,
        se,
        [F::count(yt.len()), F::count(yc.len())],
    )
    .with_diagnostic("imputed_outcomes", imputed(&treatment) + imputed(&control)))
}

struct WeightedArm<F> {
    mean: F,
    variance: F,
    weight_sum: F,
}

/// Self-normalized weighted mean with its linearized variance,
/// `n/(n-1) · Σ ω²(y − ȳ_ω)² / (Σ ω)²`.
fn weighted_arm<F: Real>(arm: Assignment, pairs: &[(F, F)]) -> Result<WeightedArm<F>, EstimateError> {
    if pairs.len() < 2 {
        return Err(EstimateError::empty(arm));
    }
    let weight_sum = pairs.iter().fold(F::zero(), |a, &(w, _)| a + w);
    if !(weight_sum > F::zero()) {
        return Err(EstimateError::empty(arm));
    }
    let mean = pairs.iter().fold(F::zero(), |a, &(w, y)| a + w * y) / weight_sum;
    let ss = pairs
        .iter()
        .fold(F::zero(), |a, &(w, y)| a + w * w * (y - mean) * (y - mean));
    let n = F::count(pairs.len());
    let variance = n / (n - F::one()) * ss / (weight_sum * weight_sum);
    Ok(WeightedArm {
        mean,
        variance,
        weight_sum,
    })
}

fn reweighted<F: Real>(
    snapshot: &FunnelSnapshot<F>,
    estimand: Estimand,
    weight_of: impl Fn(&str) -> Result<F, EstimateError>,
) -> Result<EffectEstimate<F>, EstimateError> {
    let arms = triggered_by_arm(snapshot);
    let mut max_weight = F::neg_infinity();
    let mut min_weight = F::infinity();
    let mut fitted = Vec::with_capacity(2);
    for arm in Assignment::BOTH {
        let units = &arms[arm.index()];
        let mut pairs = Vec::with_capacity(units.len());
        for unit in units {
            let w = weight_of(&unit.group)?;
            max_weight = max_weight.max(w);
            min_weight = min_weight.min(w);
            pairs.push((w, unit.outcome_or_zero()));
        }
        fitted.push(weighted_arm(arm, &pairs)?);
    }
    let (t, c) = (&fitted[0], &fitted[1]);
    Ok(EffectEstimate::new(
        estimand,
        t.mean - c.mean,
        (t.variance + c.variance).sqrt(),
        [t.weight_sum, c.weight_sum],
    )
    .with_diagnostic("max_weight", max_weight)
    .with_diagnostic("min_weight", min_weight)
    .with_diagnostic("imputed_outcomes", imputed(&arms[0]) + imputed(&arms[1])))
}

fn positive<F: Real>(table: &GroupTable<F>, group: &str) -> Result<F, EstimateError> {
    let value = *table.lookup(group)?;
    if value > F::zero() && value.is_finite() {
        Ok(value)
    } else {
        Err(EstimateError::InvalidTableValue {
            group: group.to_string(),
            value: value.to_string(),
        })
    }
}

/// Triggered ITT with a hypothetical trigger rate: unit weight
/// `T'(g) / T(g)`, each arm normalized by its own weight sum.
pub fn itt_reweighted<F: Real>(
    snapshot: &FunnelSnapshot<F>,
    observed_trigger: &GroupTable<F>,
    target_trigger: &GroupTable<F>,
) -> Result<EffectEstimate<F>, EstimateError> {
    reweighted(snapshot, Estimand::IttReweighted, |group| {
        Ok(positive(target_trigger, group)? / positive(observed_trigger, group)?)
    })
}

/// Triggered ITT measured against a reference group mix. Trigger rates are
/// estimated from the snapshot itself.
pub fn itt_reference<F: Real>(
    snapshot: &FunnelSnapshot<F>,
    reference: &Reference<F>,
) -> Result<EffectEstimate<F>, EstimateError> {
    let trigger = estimate_group_rates(snapshot, Stage::Allocated, Stage::Triggered)?;
    match reference {
        Reference::Allocation => reweighted(snapshot, Estimand::IttAllocationRef, |group| {
            Ok(F::one() / positive(&trigger, group)?)
        }),
        Reference::Target => {
            let allocation = estimate_group_rates(snapshot, Stage::Targeted, Stage::Allocated)?;
            reweighted(snapshot, Estimand::IttTargetRef, |group| {
                Ok(F::one() / (positive(&allocation, group)? * positive(&trigger, group)?))
            })
        }
        Reference::Custom(target) => {
            if target.kind() == RateKind::Propensity {
                return Err(EstimateError::Domain(
                    "a propensity table cannot serve as a trigger rate".into(),
                ));
            }
            itt_reweighted(snapshot, &trigger, target)
        }
    }
}
