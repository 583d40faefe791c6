//! Shared fixtures: random clean funnels, a literal-formula estimator oracle
//! and the calibration scenarios.

#![allow(dead_code)]

use std::collections::BTreeMap;

use funnelscope::simulator::{ActivationFailure, GroupSpec, SimScenario, CONTROL_NOT_LOGGED};
use funnelscope::{Assignment, FunnelEvent, OutcomeRecord, Stage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One unit of a randomly generated, internally consistent log.
#[derive(Clone, Debug)]
pub struct RawUnit {
    pub id: String,
    pub group: String,
    pub arm: Assignment,
    pub activated: bool,
    pub triggered: bool,
    pub treated: bool,
    pub outcome: Option<f64>,
}

impl RawUnit {
    /// The played flag travels with the outcome record.
    pub fn played(&self) -> bool {
        self.treated && self.outcome.is_some()
    }

    pub fn y(&self) -> f64 {
        self.outcome.unwrap_or(0.0)
    }

    pub fn events(&self) -> Vec<FunnelEvent> {
        let mut stages = vec![Stage::Targeted, Stage::Allocated];
        if self.activated {
            stages.push(Stage::Activated);
        }
        if self.triggered {
            stages.push(Stage::Triggered);
        }
        if self.treated {
            stages.push(Stage::Treated);
        }
        stages
            .into_iter()
            .enumerate()
            .map(|(k, stage)| FunnelEvent {
                unit_id: self.id.clone(),
                stage,
                assignment: (stage != Stage::Targeted).then_some(self.arm),
                group: self.group.clone(),
                timestamp: k as i64,
            })
            .collect()
    }
}

pub struct RawLog {
    pub units: Vec<RawUnit>,
    /// Targeted-only units per group, never allocated.
    pub targeted_only: BTreeMap<String, u64>,
}

impl RawLog {
    pub fn events(&self) -> Vec<FunnelEvent> {
        let mut events: Vec<FunnelEvent> = self.units.iter().flat_map(RawUnit::events).collect();
        for (group, &n) in &self.targeted_only {
            for i in 0..n {
                events.push(FunnelEvent {
                    unit_id: format!("x-{group}-{i}"),
                    stage: Stage::Targeted,
                    assignment: None,
                    group: group.clone(),
                    timestamp: 0,
                });
            }
        }
        events
    }

    pub fn outcomes(&self) -> Vec<OutcomeRecord<f64>> {
        self.units
            .iter()
            .filter_map(|u| u.outcome.map(|y| OutcomeRecord::new(u.id.clone(), y, u.played())))
            .collect()
    }

    pub fn triggered(&self) -> impl Iterator<Item = &RawUnit> {
        self.units.iter().filter(|u| u.triggered)
    }
}

/// A small consistent log where every group triggers in both arms at least
/// twice, with some players and non-players among triggered units.
pub fn random_log(rng: &mut ChaCha8Rng, max_units: usize) -> RawLog {
    let n_groups = rng.random_range(1..=3usize);
    let groups: Vec<String> = (0..n_groups).map(|g| format!("g{g}")).collect();
    let mut units = Vec::new();
    let mut next = 0usize;
    let mut push = |units: &mut Vec<RawUnit>, rng: &mut ChaCha8Rng, group: &str, arm: Assignment, triggered: bool| {
        let activated = match arm {
            Assignment::Treatment => rng.random_bool(0.8),
            Assignment::Control => rng.random_bool(0.3),
        };
        let treated = triggered && activated && arm == Assignment::Treatment && rng.random_bool(0.5);
        let outcome = rng
            .random_bool(0.9)
            .then(|| (rng.random_range(-10.0..10.0f64) * 64.0).round() / 64.0 + if treated { 2.0 } else { 0.0 });
        units.push(RawUnit {
            id: format!("u{next:04}"),
            group: group.to_string(),
            arm,
            activated,
            triggered,
            treated,
            outcome,
        });
        next += 1;
    };
    // two triggered units per arm per group guarantee every estimator is defined
    for g in &groups {
        for arm in Assignment::BOTH {
            for _ in 0..2 {
                push(&mut units, rng, g, arm, true);
            }
        }
    }
    let floor = units.len();
    let target = floor.max(rng.random_range(floor..=max_units.max(floor)));
    while units.len() < target {
        let g = groups[rng.random_range(0..n_groups)].clone();
        let arm = if rng.random_bool(0.5) { Assignment::Treatment } else { Assignment::Control };
        let triggered = rng.random_bool(0.6);
        push(&mut units, rng, &g, arm, triggered);
    }
    // guarantee a player per group; triggered controls never play
    for g in &groups {
        let idx: Vec<usize> = (0..units.len()).filter(|&i| units[i].group == *g && units[i].triggered).collect();
        if !idx.iter().any(|&i| units[i].treated) {
            let i = idx.iter().copied().find(|&i| units[i].arm == Assignment::Treatment).unwrap();
            units[i].activated = true;
            units[i].treated = true;
            units[i].outcome.get_or_insert(1.0);
        }
    }
    let targeted_only = groups.iter().map(|g| (g.clone(), rng.random_range(0..5u64))).collect();
    RawLog { units, targeted_only }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Literal transcriptions of the estimator formulas over raw units, sharing
/// no code with the library.
pub mod oracle {
    use super::*;

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    fn sample_var(v: &[f64]) -> f64 {
        let m = mean(v);
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
    }

    /// Returns (point, std_error).
    pub fn itt_triggered(log: &RawLog) -> (f64, f64) {
        let t: Vec<f64> = log.triggered().filter(|u| u.arm == Assignment::Treatment).map(RawUnit::y).collect();
        let c: Vec<f64> = log.triggered().filter(|u| u.arm == Assignment::Control).map(RawUnit::y).collect();
        (
            mean(&t) - mean(&c),
            (sample_var(&t) / t.len() as f64 + sample_var(&c) / c.len() as f64).sqrt(),
        )
    }

    /// T(g): triggered over allocated, pooled across arms.
    pub fn trigger_rates(log: &RawLog) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for g in log.units.iter().map(|u| u.group.clone()).collect::<std::collections::BTreeSet<_>>() {
            let allocated = log.units.iter().filter(|u| u.group == g).count() as f64;
            let triggered = log.triggered().filter(|u| u.group == g).count() as f64;
            out.insert(g, triggered / allocated);
        }
        out
    }

    /// A(g): allocated over targeted.
    pub fn allocation_rates(log: &RawLog) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (g, &extra) in &log.targeted_only {
            let allocated = log.units.iter().filter(|u| &u.group == g).count() as f64;
            out.insert(g.clone(), allocated / (allocated + extra as f64));
        }
        out
    }

    /// Σ ω y / Σ ω per arm with ω = weight(g); variance by the ratio
    /// linearization n/(n−1) Σ ω²(y − μ)² / (Σ ω)².
    pub fn weighted(log: &RawLog, weight: impl Fn(&str) -> f64) -> (f64, f64, [f64; 2]) {
        let mut means = [0.0; 2];
        let mut vars = [0.0; 2];
        let mut sums = [0.0; 2];
        for (k, arm) in [Assignment::Treatment, Assignment::Control].into_iter().enumerate() {
            let units: Vec<&RawUnit> = log.triggered().filter(|u| u.arm == arm).collect();
            let n = units.len() as f64;
            let sw: f64 = units.iter().map(|u| weight(&u.group)).sum();
            let mu = units.iter().map(|u| weight(&u.group) * u.y()).sum::<f64>() / sw;
            let ss: f64 = units.iter().map(|u| (weight(&u.group) * (u.y() - mu)).powi(2)).sum();
            means[k] = mu;
            vars[k] = n / (n - 1.0) * ss / (sw * sw);
            sums[k] = sw;
        }
        (means[0] - means[1], (vars[0] + vars[1]).sqrt(), sums)
    }

    pub fn allocation_ref(log: &RawLog) -> (f64, f64, [f64; 2]) {
        let t = trigger_rates(log);
        weighted(log, |g| 1.0 / t[g])
    }

    pub fn target_ref(log: &RawLog) -> (f64, f64, [f64; 2]) {
        let t = trigger_rates(log);
        let a = allocation_rates(log);
        weighted(log, |g| 1.0 / (a[g] * t[g]))
    }

    /// Played share among triggered units of each group, both arms pooled.
    pub fn propensities(log: &RawLog) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for g in log.triggered().map(|u| u.group.clone()).collect::<std::collections::BTreeSet<_>>() {
            let all = log.triggered().filter(|u| u.group == g).count() as f64;
            let played = log.triggered().filter(|u| u.group == g && u.played()).count() as f64;
            out.insert(g, played / all);
        }
        out
    }

    /// (1/N) Σ [w y / p − (1 − w) y / (1 − p)], se = sd(terms)/√N.
    pub fn ipw(log: &RawLog, p: &BTreeMap<String, f64>) -> (f64, f64) {
        let terms: Vec<f64> = log
            .triggered()
            .map(|u| {
                let w = if u.played() { 1.0 } else { 0.0 };
                let pg = p[&u.group];
                w * u.y() / pg - (1.0 - w) * u.y() / (1.0 - pg)
            })
            .collect();
        (mean(&terms), (sample_var(&terms) / terms.len() as f64).sqrt())
    }
}

/// Confounded activation failure: 20% of units fail, and every unit below
/// the failure quantile loses 2.0 on the outcome.
pub fn confounded_scenario(seed: u64, n: u64) -> SimScenario {
    SimScenario {
        seed,
        n_targeted: n,
        allocation_prob: 1.0,
        arm_split: [1.0, 1.0],
        groups: vec![GroupSpec {
            name: "all".into(),
            share: 1.0,
            trigger_prob: 0.5,
            base_outcome_mean: 1.0,
            base_outcome_sd: 1.0,
            itt_effect: 0.3,
            play_effect: 0.5,
        }],
        activation_failure: ActivationFailure {
            prob_treatment: 0.2,
            prob_control: CONTROL_NOT_LOGGED,
            outcome_confounding: 2.0,
        },
        compliance_prob: 0.8,
    }
}

/// Allocated mix 1:2 with trigger rates 0.1 and 0.5, so the triggered mix
/// is 1:10, and very different effects per group.
pub fn two_group_scenario(seed: u64, n: u64) -> SimScenario {
    let group = |name: &str, share: f64, trigger: f64, mean: f64, itt: f64| GroupSpec {
        name: name.into(),
        share,
        trigger_prob: trigger,
        base_outcome_mean: mean,
        base_outcome_sd: 1.0,
        itt_effect: itt,
        play_effect: 0.0,
    };
    SimScenario {
        seed,
        n_targeted: n,
        allocation_prob: 1.0,
        arm_split: [1.0, 1.0],
        groups: vec![
            group("light", 1.0 / 3.0, 0.1, 1.0, 1.0),
            group("heavy", 2.0 / 3.0, 0.5, 3.0, 0.2),
        ],
        activation_failure: ActivationFailure::default(),
        compliance_prob: 0.0,
    }
}

/// Non-compliance without confounding: 60% of activated, triggered
/// treatment units play, with a per-group play effect and no ITT effect
/// beyond playing.
pub fn compliance_scenario(seed: u64, n: u64) -> SimScenario {
    let group = |name: &str, share: f64, trigger: f64, mean: f64, play: f64| GroupSpec {
        name: name.into(),
        share,
        trigger_prob: trigger,
        base_outcome_mean: mean,
        base_outcome_sd: 1.0,
        itt_effect: 0.0,
        play_effect: play,
    };
    SimScenario {
        seed,
        n_targeted: n,
        allocation_prob: 1.0,
        arm_split: [1.0, 1.0],
        groups: vec![group("a", 0.4, 0.3, 0.5, 1.0), group("b", 0.6, 0.6, 1.0, 0.4)],
        activation_failure: ActivationFailure {
            prob_treatment: 0.1,
            prob_control: CONTROL_NOT_LOGGED,
            outcome_confounding: 0.0,
        },
        compliance_prob: 0.6,
    }
}

/// Share of `hits` over `n`, for coverage lines.
pub fn share(hits: usize, n: usize) -> f64 {
    hits as f64 / n as f64
}

pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}
