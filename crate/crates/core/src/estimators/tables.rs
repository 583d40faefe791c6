use std::collections::BTreeMap;

use serde::Serialize;

use super::EstimateError;
use crate::funnel::{FunnelSnapshot, Stage};
use crate::num::{Real, Scalar};

/// What a [`GroupTable`] holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RateKind {
    /// Share of units at `from` that reach `to`.
    Transition { from: Stage, to: Stage },
    /// Probability of engaging with the treatment experience.
    Propensity,
    /// Externally supplied rates, e.g. a hypothetical trigger rate.
    Custom,
}

impl RateKind {
    pub const TRIGGER: RateKind = RateKind::Transition {
        from: Stage::Allocated,
        to: Stage::Triggered,
    };
    pub const ALLOCATION: RateKind = RateKind::Transition {
        from: Stage::Targeted,
        to: Stage::Allocated,
    };
}

/// Per-group rates keyed by group name.
///
/// Values lie in `(0, 1]`, or in `(0, 1)` for propensity tables.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupTable<T> {
    kind: RateKind,
    values: BTreeMap<String, T>,
}

impl<T: Scalar> GroupTable<T> {
    pub fn new(kind: RateKind, values: BTreeMap<String, T>) -> Result<Self, EstimateError> {
        for (group, value) in &values {
            let upper_ok = if kind == RateKind::Propensity {
                *value < T::one()
            } else {
                *value <= T::one()
            };
            if !(*value > T::zero() && upper_ok) {
                if kind == RateKind::Propensity {
                    return Err(EstimateError::DegeneratePropensity { group: group.clone() });
                }
                return Err(EstimateError::InvalidTableValue {
                    group: group.clone(),
                    value: format!("{value:?}"),
                });
            }
        }
        Ok(Self { kind, values })
    }

    /// The same value for every listed group.
    pub fn uniform<'a>(
        kind: RateKind,
        groups: impl IntoIterator<Item = &'a str>,
        value: T,
    ) -> Result<Self, EstimateError> {
        Self::new(
            kind,
            groups.into_iter().map(|g| (g.to_string(), value.clone())).collect(),
        )
    }

    pub fn kind(&self) -> RateKind {
        self.kind
    }

    pub fn get(&self, group: &str) -> Option<&T> {
        self.values.get(group)
    }

    pub fn values(&self) -> &BTreeMap<String, T> {
        &self.values
    }

    pub fn groups(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn lookup(&self, group: &str) -> Result<&T, EstimateError> {
        self.get(group).ok_or_else(|| EstimateError::MissingGroup {
            group: group.to_string(),
        })
    }
}

/// Plug-in per-group transition rates from `from_stage` to `to_stage`,
/// pooled across arms.
pub fn estimate_group_rates<F: Real>(
    snapshot: &FunnelSnapshot<F>,
    from_stage: Stage,
    to_stage: Stage,
) -> Result<GroupTable<F>, EstimateError> {
    estimate_group_rates_with(snapshot, from_stage, to_stage, false)
}

/// As [`estimate_group_rates`]; with `add_one` every rate becomes
/// `(k + 1) / (n + 2)`, which keeps sparse groups off zero.
pub fn estimate_group_rates_with<F: Real>(
    snapshot: &FunnelSnapshot<F>,
    from_stage: Stage,
    to_stage: Stage,
    add_one: bool,
) -> Result<GroupTable<F>, EstimateError> {
    if !from_stage.precedes(to_stage) {
        return Err(EstimateError::InvalidStagePair {
            from: from_stage,
            to: to_stage,
        });
    }
    let denominators = if from_stage == Stage::Targeted {
        snapshot
            .group_target_counts()
            .ok_or(EstimateError::MissingTargetData)?
    } else {
        snapshot.group_counts(from_stage)
    };
    let numerators = snapshot.group_counts(to_stage);
    if let Some(group) = numerators.keys().find(|g| !denominators.contains_key(*g)) {
        return Err(EstimateError::MissingGroup { group: group.clone() });
    }

    let mut values = BTreeMap::new();
    for (group, &n) in &denominators {
        let k = numerators.get(group).copied().unwrap_or(0);
        let rate = if add_one {
            F::lit((k + 1) as f64) / F::lit((n + 2) as f64)
        } else {
            if k == 0 {
                return Err(EstimateError::DegenerateRate { group: group.clone() });
            }
            F::lit(k as f64) / F::lit(n as f64)
        };
        values.insert(group.clone(), rate);
    }
    GroupTable::new(
        RateKind::Transition {
            from: from_stage,
            to: to_stage,
        },
        values,
    )
}

/// Group composition of the triggered population implied by a reference
/// composition and per-group trigger rates, normalized to sum to one.
///
/// Generic over [`Scalar`], so it is exact on rationals.
pub fn compose_triggered_mix<T: Scalar>(
    reference_weights: &BTreeMap<String, T>,
    trigger_rates: &GroupTable<T>,
) -> Result<BTreeMap<String, T>, EstimateError> {
    let same_keys = reference_weights.len() == trigger_rates.len()
        && reference_weights.keys().all(|g| trigger_rates.get(g).is_some());
    if !same_keys {
        let reference: Vec<_> = reference_weights.keys().map(String::as_str).collect();
        let rates: Vec<_> = trigger_rates.groups().collect();
        return Err(EstimateError::KeyMismatch(format!(
            "reference {reference:?} vs rates {rates:?}"
        )));
    }
    if let Some((group, value)) = reference_weights.iter().find(|(_, w)| !(**w > T::zero())) {
        return Err(EstimateError::InvalidTableValue {
            group: group.clone(),
            value: format!("{value:?}"),
        });
    }

    let products: BTreeMap<String, T> = reference_weights
        .iter()
        .map(|(g, w)| (g.clone(), w.clone() * trigger_rates.lookup(g).expect("keys checked").clone()))
        .collect();
    let total = products.values().fold(T::zero(), |acc, v| acc + v.clone());
    Ok(products.into_iter().map(|(g, v)| (g, v / total.clone())).collect())
}
