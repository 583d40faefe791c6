use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{truth, GroundTruth, SimError, SimScenario};
use crate::estimators::{welch_difference, EffectEstimate, EstimateError, Estimand};
use crate::funnel::{Assignment, FunnelEvent, FunnelSnapshot, OutcomeRecord, Stage};

/// Latent and observed state of one simulated unit.
#[derive(Clone, Debug, PartialEq)]
pub struct SimUnit {
    pub index: u64,
    pub group: usize,
    /// `None` when the unit was targeted but not allocated.
    pub arm: Option<Assignment>,
    pub connectivity: f64,
    pub activated: bool,
    pub activation_logged: bool,
    pub triggered: bool,
    pub played: bool,
    pub outcome: f64,
}

/// Draws unit `index` of a scenario. Independent of every other unit.
#[derive(Clone, Debug)]
pub struct UnitSampler<'a> {
    scenario: &'a SimScenario,
    key: [u8; 32],
    cumulative_share: Vec<f64>,
}

impl<'a> UnitSampler<'a> {
    pub fn new(scenario: &'a SimScenario) -> Self {
        let key = ChaCha8Rng::seed_from_u64(scenario.seed).get_seed();
        let mut acc = 0.0;
        let cumulative_share = scenario
            .groups
            .iter()
            .map(|g| {
                acc += g.share;
                acc
            })
            .collect();
        Self {
            scenario,
            key,
            cumulative_share,
        }
    }

    pub fn sample(&self, index: u64) -> SimUnit {
        let s = self.scenario;
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(index);

        // fixed number of draws per unit, in a fixed order
        let u_alloc: f64 = rng.random();
        let u_arm: f64 = rng.random();
        let u_group: f64 = rng.random();
        let connectivity: f64 = rng.random();
        let u_trigger: f64 = rng.random();
        let u_comply: f64 = rng.random();
        let z: f64 = rng.sample(StandardNormal);

        let group = self
            .cumulative_share
            .iter()
            .position(|&c| u_group < c)
            .unwrap_or(s.groups.len() - 1);
        let spec = &s.groups[group];
        let failure = &s.activation_failure;
        let low_connectivity = connectivity < failure.prob_treatment;

        let allocated = u_alloc < s.allocation_prob;
        let arm = allocated.then(|| {
            if u_arm < s.treatment_share() {
                Assignment::Treatment
            } else {
                Assignment::Control
            }
        });
        let (activated, activation_logged) = match arm {
            Some(Assignment::Treatment) => (!low_connectivity, true),
            Some(Assignment::Control) if s.control_activation_logged() => {
                (connectivity >= failure.prob_control, true)
            }
            _ => (false, false),
        };
        let triggered = allocated && u_trigger < spec.trigger_prob;
        let treatment = arm == Some(Assignment::Treatment);
        let played = treatment && triggered && activated && u_comply < s.compliance_prob;

        let mut outcome = spec.base_outcome_mean + spec.base_outcome_sd * z;
        if treatment && triggered {
            outcome += spec.itt_effect;
        }
        if played {
            outcome += spec.play_effect;
        }
        if low_connectivity {
            outcome -= failure.outcome_confounding;
        }

        SimUnit {
            index,
            group,
            arm,
            connectivity,
            activated,
            activation_logged,
            triggered,
            played,
            outcome,
        }
    }
}

/// Convenience for a single draw; prefer [`UnitSampler`] in loops.
pub fn sample_unit(scenario: &SimScenario, index: u64) -> SimUnit {
    UnitSampler::new(scenario).sample(index)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimOutput {
    pub events: Vec<FunnelEvent>,
    pub outcomes: Vec<OutcomeRecord<f64>>,
    pub truth: GroundTruth,
}

pub fn unit_id(index: u64) -> String {
    format!("u{index:08}")
}

/// Generates a full five-stage event log plus outcomes for every allocated
/// unit. Output is in unit-index order and depends only on the scenario.
pub fn simulate(scenario: &SimScenario) -> Result<SimOutput, SimError> {
    scenario.validate()?;
    let truth = truth::ground_truth(scenario)?;
    let sampler = UnitSampler::new(scenario);
    let units: Vec<SimUnit> = (0..scenario.n_targeted)
        .into_par_iter()
        .map(|i| sampler.sample(i))
        .collect();

    let mut events = Vec::with_capacity(units.len() * 3);
    let mut outcomes = Vec::with_capacity(units.len());
    for unit in &units {
        let id = unit_id(unit.index);
        let group = &scenario.groups[unit.group].name;
        let base_ts = unit.index as i64 * 10;
        let mut push = |stage: Stage, arm: Option<Assignment>| {
            events.push(FunnelEvent {
                unit_id: id.clone(),
                stage,
                assignment: arm,
                group: group.clone(),
                timestamp: base_ts + stage as i64,
            });
        };
        push(Stage::Targeted, None);
        let Some(arm) = unit.arm else { continue };
        push(Stage::Allocated, Some(arm));
        if unit.activation_logged && unit.activated {
            push(Stage::Activated, Some(arm));
        }
        if unit.triggered {
            push(Stage::Triggered, Some(arm));
        }
        if unit.played {
            push(Stage::Treated, Some(arm));
        }
        outcomes.push(OutcomeRecord::new(id, unit.outcome, unit.played));
    }
    Ok(SimOutput {
        events,
        outcomes,
        truth,
    })
}

/// Activated-and-triggered treatment units against all triggered controls.
///
/// Deliberately the wrong comparison: dropping treatment units that failed
/// to activate confounds the contrast whenever activation failure and
/// outcome share a cause.
pub fn naive_activated_comparison(snapshot: &FunnelSnapshot<f64>) -> Result<EffectEstimate<f64>, EstimateError> {
    let mut treatment = Vec::new();
    let mut control = Vec::new();
    for unit in snapshot.units_at(Stage::Triggered) {
        match unit.assignment {
            Some(Assignment::Treatment) if unit.counts_at(Stage::Activated) => treatment.push(unit.outcome_or_zero()),
            Some(Assignment::Control) => control.push(unit.outcome_or_zero()),
            _ => {}
        }
    }
    let (point, se) = welch_difference(&treatment, &control)?;
    Ok(EffectEstimate::new(
        Estimand::NaiveActivated,
        point,
        se,
        [treatment.len() as f64, control.len() as f64],
    )
    .with_diagnostic("biased_by_construction", 1.0))
}
