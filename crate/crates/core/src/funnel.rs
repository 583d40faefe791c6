//! The five-stage experiment funnel: domain types, reconciliation of raw
//! events into per-unit states, and the four funnel rates.
//!
//! Stage membership follows a partial order rather than a chain:
//!
//! ```text
//! Targeted ⊇ Allocated ⊇ Activated ⊇ Treated
//!            Allocated ⊇ Triggered ⊇ Treated
//! ```
//!
//! A triggered unit need not be activated.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Violation, ViolationKind};
use crate::num::{Real, Scalar};

/// Group key used when events carry no group.
pub const DEFAULT_GROUP: &str = "_all";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FunnelError {
    #[error("stage `{stage}` requires an assignment (unit {unit_id})")]
    MissingAssignment { unit_id: String, stage: Stage },
    #[error("{what} must lie in [0, 1], got {value}")]
    Domain { what: &'static str, value: String },
    #[error("n_targeted = {n_targeted} is smaller than the {n_allocated} allocated units")]
    TargetCountTooSmall { n_targeted: u64, n_allocated: u64 },
    #[error("group `{group}` has {n_targeted} targeted but {n_allocated} allocated units")]
    GroupTargetTooSmall {
        group: String,
        n_targeted: u64,
        n_allocated: u64,
    },
    #[error("unknown {what} `{value}`")]
    Unknown { what: &'static str, value: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Assignment {
    Treatment,
    Control,
}

impl Assignment {
    pub const BOTH: [Assignment; 2] = [Assignment::Treatment, Assignment::Control];

    #[inline]
    pub fn index(self) -> usize {
        match self {
            Assignment::Treatment => 0,
            Assignment::Control => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Assignment::Treatment => "treatment",
            Assignment::Control => "control",
        }
    }
}

impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Assignment {
    type Err = FunnelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "treatment" => Ok(Assignment::Treatment),
            "control" => Ok(Assignment::Control),
            other => Err(FunnelError::Unknown {
                what: "assignment",
                value: other.to_string(),
            }),
        }
    }
}

/// A funnel stage.
///
/// The derived `Ord` is declaration order and exists for use as a map key;
/// use [`Stage::implies`] for the funnel's actual containment relation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Targeted,
    Allocated,
    Activated,
    Triggered,
    Treated,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Targeted,
        Stage::Allocated,
        Stage::Activated,
        Stage::Triggered,
        Stage::Treated,
    ];

    /// Stages whose membership is checked when this one is reached.
    ///
    /// `Targeted` is never required: many platforms cannot log units that
    /// were not allocated.
    pub fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::Targeted | Stage::Allocated => &[],
            Stage::Activated | Stage::Triggered => &[Stage::Allocated],
            Stage::Treated => &[Stage::Triggered, Stage::Activated],
        }
    }

    /// `true` when reaching `self` implies having reached `other`.
    pub fn implies(self, other: Stage) -> bool {
        use Stage::*;
        if self == other {
            return true;
        }
        match self {
            Targeted => false,
            Allocated => other == Targeted,
            Activated | Triggered => matches!(other, Targeted | Allocated),
            Treated => other != Treated,
        }
    }

    /// Strict precedence in the funnel's partial order.
    pub fn precedes(self, later: Stage) -> bool {
        self != later && later.implies(self)
    }

    pub fn requires_assignment(self) -> bool {
        self != Stage::Targeted
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Targeted => "targeted",
            Stage::Allocated => "allocated",
            Stage::Activated => "activated",
            Stage::Triggered => "triggered",
            Stage::Treated => "treated",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = FunnelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|stage| stage.as_str() == s)
            .ok_or_else(|| FunnelError::Unknown {
                what: "stage",
                value: s.to_string(),
            })
    }
}

/// One logged stage transition for one unit.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FunnelEvent {
    pub unit_id: String,
    pub stage: Stage,
    pub assignment: Option<Assignment>,
    pub group: String,
    /// Milliseconds.
    pub timestamp: i64,
}

impl FunnelEvent {
    pub fn new(
        unit_id: impl Into<String>,
        stage: Stage,
        assignment: Option<Assignment>,
        group: impl Into<String>,
        timestamp: i64,
    ) -> Result<Self, FunnelError> {
        let unit_id = unit_id.into();
        if stage.requires_assignment() && assignment.is_none() {
            return Err(FunnelError::MissingAssignment { unit_id, stage });
        }
        Ok(Self {
            unit_id,
            stage,
            assignment,
            group: group.into(),
            timestamp,
        })
    }

    /// Ordering key used to pick the surviving event among duplicates.
    /// Later timestamps win; the remaining fields only break exact ties so
    /// the choice does not depend on input order.
    fn recency_key(&self) -> (i64, Stage, &str, Option<Assignment>) {
        (self.timestamp, self.stage, &self.group, self.assignment)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord<F> {
    pub unit_id: String,
    pub outcome: F,
    #[serde(default)]
    pub played: bool,
}

impl<F> OutcomeRecord<F> {
    pub fn new(unit_id: impl Into<String>, outcome: F, played: bool) -> Self {
        Self {
            unit_id: unit_id.into(),
            outcome,
            played,
        }
    }
}

/// Reconciled funnel state of a single unit.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitState<F> {
    pub unit_id: String,
    pub assignment: Option<Assignment>,
    pub group: String,
    /// Stages present in the log, with the timestamp of the surviving event.
    /// Kept as logged: prerequisite violations are reported, not repaired.
    pub reached: BTreeMap<Stage, i64>,
    /// `None` when no outcome record exists; estimators read it as zero.
    pub outcome: Option<F>,
    pub played: bool,
}

impl<F: Copy + num_traits::Zero> UnitState<F> {
    pub fn has_reached(&self, stage: Stage) -> bool {
        self.reached.contains_key(&stage)
    }

    /// Whether the unit is counted in the population of `stage`.
    ///
    /// A stage only counts when its prerequisites count too, so a unit that
    /// logged `Treated` without `Triggered` is kept out of the treated set.
    pub fn counts_at(&self, stage: Stage) -> bool {
        match stage {
            Stage::Targeted => self.has_reached(Stage::Targeted) || self.counts_at(Stage::Allocated),
            Stage::Allocated => self.has_reached(Stage::Allocated) && self.assignment.is_some(),
            Stage::Activated | Stage::Triggered => {
                self.has_reached(stage) && self.counts_at(Stage::Allocated)
            }
            Stage::Treated => {
                self.has_reached(Stage::Treated)
                    && self.counts_at(Stage::Activated)
                    && self.counts_at(Stage::Triggered)
            }
        }
    }

    /// Arm the unit counts in at `stage`, if any.
    pub fn arm_at(&self, stage: Stage) -> Option<Assignment> {
        if self.counts_at(stage) {
            self.assignment
        } else {
            None
        }
    }

    #[inline]
    pub fn outcome_or_zero(&self) -> F {
        self.outcome.unwrap_or_else(F::zero)
    }

    /// One entry per violated subset rule.
    pub fn stage_violations(&self) -> Vec<ViolationKind> {
        let mut kinds = Vec::new();
        for stage in self.reached.keys().copied() {
            for &required in stage.prerequisites() {
                if !self.has_reached(required) {
                    kinds.push(ViolationKind::missing_prerequisite(stage, required));
                }
            }
        }
        kinds
    }

    /// Events that reproduce this state when fed back through [`build_funnel`].
    pub fn to_events(&self) -> impl Iterator<Item = FunnelEvent> + '_ {
        self.reached.iter().map(move |(&stage, &timestamp)| FunnelEvent {
            unit_id: self.unit_id.clone(),
            stage,
            assignment: if stage.requires_assignment() {
                self.assignment
            } else {
                None
            },
            group: self.group.clone(),
            timestamp,
        })
    }
}

/// A per-arm pair of counts, indexable by [`Assignment`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ArmCounts {
    pub treatment: u64,
    pub control: u64,
}

impl ArmCounts {
    pub fn get(&self, arm: Assignment) -> u64 {
        match arm {
            Assignment::Treatment => self.treatment,
            Assignment::Control => self.control,
        }
    }

    fn bump(&mut self, arm: Assignment) {
        match arm {
            Assignment::Treatment => self.treatment += 1,
            Assignment::Control => self.control += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.treatment + self.control
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FunnelCounts {
    /// `None` when targeted units are neither logged nor configured.
    pub targeted: Option<u64>,
    pub allocated: ArmCounts,
    pub activated: ArmCounts,
    pub triggered: ArmCounts,
    pub treated: ArmCounts,
}

impl FunnelCounts {
    pub fn arm_counts(&self, stage: Stage) -> Option<&ArmCounts> {
        match stage {
            Stage::Targeted => None,
            Stage::Allocated => Some(&self.allocated),
            Stage::Activated => Some(&self.activated),
            Stage::Triggered => Some(&self.triggered),
            Stage::Treated => Some(&self.treated),
        }
    }
}

/// Reconciled per-unit funnel state for a whole experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct FunnelSnapshot<F> {
    units: Vec<UnitState<F>>,
    counts: FunnelCounts,
    targeted_logged: bool,
    group_targets: Option<BTreeMap<String, u64>>,
    excluded: Vec<String>,
    imputed_outcomes: usize,
    unmatched_outcomes: usize,
}

impl<F: Copy + num_traits::Zero> FunnelSnapshot<F> {
    /// Builds a snapshot directly from unit states, sorting them by id.
    pub fn from_units(mut units: Vec<UnitState<F>>) -> Self {
        units.sort_by(|a, b| a.unit_id.cmp(&b.unit_id));
        let targeted_logged = units.iter().any(|u| u.has_reached(Stage::Targeted));
        let imputed_outcomes = units
            .iter()
            .filter(|u| u.counts_at(Stage::Allocated) && u.outcome.is_none())
            .count();
        let mut snapshot = Self {
            units,
            counts: FunnelCounts::default(),
            targeted_logged,
            group_targets: None,
            excluded: Vec::new(),
            imputed_outcomes,
            unmatched_outcomes: 0,
        };
        snapshot.recount();
        snapshot
    }

    fn recount(&mut self) {
        let mut counts = FunnelCounts::default();
        let mut targeted = 0u64;
        for unit in &self.units {
            if unit.counts_at(Stage::Targeted) {
                targeted += 1;
            }
            let Some(arm) = unit.arm_at(Stage::Allocated) else {
                continue;
            };
            counts.allocated.bump(arm);
            if unit.counts_at(Stage::Activated) {
                counts.activated.bump(arm);
            }
            if unit.counts_at(Stage::Triggered) {
                counts.triggered.bump(arm);
            }
            if unit.counts_at(Stage::Treated) {
                counts.treated.bump(arm);
            }
        }
        counts.targeted = if self.targeted_logged {
            Some(targeted)
        } else {
            self.counts.targeted
        };
        self.counts = counts;
    }

    pub fn units(&self) -> &[UnitState<F>] {
        &self.units
    }

    pub fn counts(&self) -> &FunnelCounts {
        &self.counts
    }

    /// Whether the log itself contained targeted-stage events.
    pub fn targeted_logged(&self) -> bool {
        self.targeted_logged
    }

    /// Units dropped because of conflicting assignments.
    pub fn excluded(&self) -> &[String] {
        &self.excluded
    }

    /// Allocated units whose outcome was imputed as zero.
    pub fn imputed_outcomes(&self) -> usize {
        self.imputed_outcomes
    }

    /// Outcome records whose unit never appeared in the event log.
    pub fn unmatched_outcomes(&self) -> usize {
        self.unmatched_outcomes
    }

    /// Units counted at `stage`, in unit-id order.
    pub fn units_at(&self, stage: Stage) -> impl Iterator<Item = &UnitState<F>> + '_ {
        self.units.iter().filter(move |u| u.counts_at(stage))
    }

    /// Supplies the targeted population size when the log does not carry it.
    ///
    /// Ignored when targeted events were logged; the log wins.
    pub fn with_n_targeted(mut self, n_targeted: u64) -> Result<Self, FunnelError> {
        let n_allocated = self.counts.allocated.total();
        if n_targeted < n_allocated {
            return Err(FunnelError::TargetCountTooSmall {
                n_targeted,
                n_allocated,
            });
        }
        if !self.targeted_logged {
            self.counts.targeted = Some(n_targeted);
        }
        Ok(self)
    }

    /// Supplies per-group targeted counts for target-population reweighting.
    pub fn with_group_targets(
        mut self,
        mut targets: BTreeMap<String, u64>,
    ) -> Result<Self, FunnelError> {
        let allocated = self.group_counts(Stage::Allocated);
        for (group, &n_allocated) in &allocated {
            let n_targeted = targets.get(group).copied().unwrap_or(0);
            if n_targeted < n_allocated {
                return Err(FunnelError::GroupTargetTooSmall {
                    group: group.clone(),
                    n_targeted,
                    n_allocated,
                });
            }
        }
        targets.retain(|_, n| *n > 0);
        if !self.targeted_logged {
            let total = targets.values().sum();
            self = self.with_n_targeted(total)?;
        }
        self.group_targets = Some(targets);
        Ok(self)
    }

    /// Per-group unit counts at `stage`, pooled across arms.
    pub fn group_counts(&self, stage: Stage) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for unit in self.units_at(stage) {
            *out.entry(unit.group.clone()).or_insert(0) += 1;
        }
        out
    }

    /// Per-group targeted counts, either logged or configured.
    pub fn group_target_counts(&self) -> Option<BTreeMap<String, u64>> {
        if self.targeted_logged {
            Some(self.group_counts(Stage::Targeted))
        } else {
            self.group_targets.clone()
        }
    }

    /// The event list this snapshot was reconciled into.
    pub fn to_events(&self) -> Vec<FunnelEvent> {
        self.units.iter().flat_map(UnitState::to_events).collect()
    }

    pub fn to_outcomes(&self) -> Vec<OutcomeRecord<F>> {
        self.units
            .iter()
            .filter_map(|u| {
                u.outcome
                    .map(|outcome| OutcomeRecord::new(u.unit_id.clone(), outcome, u.played))
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct BuildOptions {
    /// Emit a violation for every allocated unit without an outcome record.
    pub strict_outcomes: bool,
    /// Number of unit-id shards reconciled concurrently. The result does
    /// not depend on it.
    pub shards: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            strict_outcomes: false,
            shards: rayon::current_num_threads().max(1),
        }
    }
}

/// Reconciles raw events and outcomes into a snapshot.
///
/// Never fails: every anomaly is returned as a [`Violation`].
pub fn build_funnel<F>(
    events: &[FunnelEvent],
    outcomes: &[OutcomeRecord<F>],
) -> (FunnelSnapshot<F>, Vec<Violation>)
where
    F: Copy + num_traits::Zero + Send + Sync,
{
    build_funnel_with(events, outcomes, &BuildOptions::default())
}

pub fn build_funnel_with<F>(
    events: &[FunnelEvent],
    outcomes: &[OutcomeRecord<F>],
    options: &BuildOptions,
) -> (FunnelSnapshot<F>, Vec<Violation>)
where
    F: Copy + num_traits::Zero + Send + Sync,
{
    let mut violations = Vec::new();

    let mut outcome_by_unit: HashMap<&str, &OutcomeRecord<F>> = HashMap::with_capacity(outcomes.len());
    for record in outcomes {
        if outcome_by_unit.contains_key(record.unit_id.as_str()) {
            violations.push(Violation::for_unit(
                ViolationKind::DuplicateOutcome,
                &record.unit_id,
                "duplicate outcome record; keeping the first",
            ));
        } else {
            outcome_by_unit.insert(&record.unit_id, record);
        }
    }

    let n_shards = options.shards.max(1);
    let mut shards: Vec<Vec<&FunnelEvent>> = vec![Vec::new(); n_shards];
    for event in events {
        shards[shard_of(&event.unit_id, n_shards)].push(event);
    }

    let reconciled: Vec<Vec<Reconciled<F>>> = shards
        .into_par_iter()
        .map(|mut shard| {
            // stable sort: a unit's events become one contiguous run
            shard.sort_by(|a, b| a.unit_id.cmp(&b.unit_id));
            shard
                .chunk_by(|a, b| a.unit_id == b.unit_id)
                .map(|unit_events| {
                    let unit_id = unit_events[0].unit_id.as_str();
                    reconcile_unit(unit_id, unit_events, outcome_by_unit.get(unit_id).copied())
                })
                .collect()
        })
        .collect();

    let mut units = Vec::new();
    let mut excluded = Vec::new();
    let mut unit_violations = Vec::new();
    let mut matched_outcomes = 0;
    for found in reconciled.into_iter().flatten() {
        matched_outcomes += usize::from(found.matched_outcome);
        match found.state {
            Some(state) => units.push(state),
            None => {
                if let Some(v) = found.violations.iter().find(|v| v.kind == ViolationKind::AssignmentConflict) {
                    excluded.extend(v.unit_id.clone());
                }
            }
        }
        unit_violations.extend(found.violations);
    }
    excluded.sort();
    unit_violations.sort_by(violation_order);

    let mut snapshot = FunnelSnapshot::from_units(units);
    snapshot.excluded = excluded;
    snapshot.unmatched_outcomes = outcome_by_unit.len() - matched_outcomes;

    if options.strict_outcomes {
        for unit in snapshot.units_at(Stage::Allocated) {
            if unit.outcome.is_none() {
                unit_violations.push(Violation::for_unit(
                    ViolationKind::MissingOutcome,
                    &unit.unit_id,
                    "allocated unit has no outcome record",
                ));
            }
        }
        unit_violations.sort_by(violation_order);
    }

    violations.extend(unit_violations);
    (snapshot, violations)
}

fn violation_order(a: &Violation, b: &Violation) -> std::cmp::Ordering {
    (&a.unit_id, a.kind, &a.message).cmp(&(&b.unit_id, b.kind, &b.message))
}

fn shard_of(unit_id: &str, n_shards: usize) -> usize {
    let mut hasher = DefaultHasher::new();
    unit_id.hash(&mut hasher);
    (hasher.finish() % n_shards as u64) as usize
}

struct Reconciled<F> {
    state: Option<UnitState<F>>,
    violations: Vec<Violation>,
    matched_outcome: bool,
}

fn reconcile_unit<F: Copy + num_traits::Zero>(
    unit_id: &str,
    events: &[&FunnelEvent],
    outcome: Option<&OutcomeRecord<F>>,
) -> Reconciled<F> {
    let done = |state, violations| Reconciled {
        state,
        violations,
        matched_outcome: outcome.is_some(),
    };
    let mut violations = Vec::new();

    let mut usable: Vec<&FunnelEvent> = Vec::with_capacity(events.len());
    for &event in events {
        if event.stage.requires_assignment() && event.assignment.is_none() {
            violations.push(Violation::for_unit(
                ViolationKind::MalformedRecord,
                unit_id,
                format!("`{}` event without an assignment", event.stage),
            ));
        } else {
            usable.push(event);
        }
    }

    let mut arms: Vec<Assignment> = usable
        .iter()
        .filter(|e| e.stage.requires_assignment())
        .filter_map(|e| e.assignment)
        .collect();
    arms.sort();
    arms.dedup();
    if arms.len() > 1 {
        violations.push(Violation::for_unit(
            ViolationKind::AssignmentConflict,
            unit_id,
            "unit logged under both treatment and control; excluded from all estimates",
        ));
        return done(None, violations);
    }

    let Some(latest) = usable.iter().max_by(|a, b| a.recency_key().cmp(&b.recency_key())) else {
        return done(None, violations);
    };
    let mut surviving: BTreeMap<Stage, &FunnelEvent> = BTreeMap::new();
    for &event in &usable {
        surviving
            .entry(event.stage)
            .and_modify(|kept| {
                if event.recency_key() > kept.recency_key() {
                    *kept = event;
                }
            })
            .or_insert(event);
    }

    let state = UnitState {
        unit_id: unit_id.to_string(),
        assignment: arms.first().copied(),
        group: latest.group.clone(),
        reached: surviving.iter().map(|(&s, e)| (s, e.timestamp)).collect(),
        outcome: outcome.map(|o| o.outcome),
        played: outcome.is_some_and(|o| o.played),
    };
    for kind in state.stage_violations() {
        violations.push(Violation::for_unit(kind, unit_id, kind.describe()));
    }
    done(Some(state), violations)
}

/// The four funnel rates; `None` marks an undefined rate (zero denominator).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FunnelRates<F> {
    pub allocation_rate: Option<F>,
    pub activation_rate: Option<F>,
    pub trigger_rate: Option<F>,
    pub compliance_rate: Option<F>,
}

fn ratio<F: Real>(numerator: u64, denominator: u64) -> Option<F> {
    (denominator > 0).then(|| F::lit(numerator as f64) / F::lit(denominator as f64))
}

pub fn compute_rates<F: Real>(snapshot: &FunnelSnapshot<F>) -> FunnelRates<F> {
    let counts = snapshot.counts();
    let allocated = counts.allocated.total();
    FunnelRates {
        allocation_rate: counts.targeted.and_then(|n| ratio(allocated, n)),
        activation_rate: ratio(counts.activated.total(), allocated),
        trigger_rate: ratio(counts.triggered.total(), allocated),
        compliance_rate: ratio(counts.treated.treatment, counts.triggered.treatment),
    }
}

/// Effect on the whole allocated population of a lift that only reaches
/// triggered units.
pub fn total_effect_dilution<T: Scalar>(lift_among_triggered: T, trigger_rate: T) -> Result<T, FunnelError> {
    if !(trigger_rate >= T::zero() && trigger_rate <= T::one()) {
        return Err(FunnelError::Domain {
            what: "trigger_rate",
            value: format!("{trigger_rate:?}"),
        });
    }
    Ok(lift_among_triggered * trigger_rate)
}
