//! Experiment-funnel analytics.
//!
//! Reconstructs the targeted → allocated → activated / triggered → treated
//! funnel from raw event logs, checks every stage for sample-ratio
//! mismatch, and estimates triggered, reference-reweighted and
//! inverse-propensity effects. A simulator of imperfect experiments with
//! closed-form ground truth backs the estimator tests.
//!
//! The statistics are generic over the float type ([`Real`]); rate
//! composition and dilution are generic over any ordered field
//! ([`Scalar`]), including exact rationals. The aliases below fix the
//! common instantiations.

pub mod cli;
pub mod estimators;
pub mod funnel;
pub mod ingest;
pub mod num;
pub mod report;
pub mod simulator;
pub mod special;
pub mod srm;

pub use estimators::{EffectEstimate, EstimateError, Estimand, GroupTable, RateKind, Reference};
pub use funnel::{
    build_funnel, build_funnel_with, compute_rates, total_effect_dilution, Assignment, BuildOptions, FunnelEvent,
    FunnelRates, FunnelSnapshot, OutcomeRecord, Stage, UnitState,
};
pub use ingest::{Violation, ViolationKind};
pub use num::{Real, Scalar};
pub use srm::{DesignRatio, SrmResult, Verdict};

/// Exact rational scalar.
pub type Rational = num_rational::Rational64;

pub type Snapshot = FunnelSnapshot<f64>;
pub type Snapshot32 = FunnelSnapshot<f32>;
pub type Outcome = OutcomeRecord<f64>;
pub type Estimate = EffectEstimate<f64>;
pub type Estimate32 = EffectEstimate<f32>;
pub type Rates = FunnelRates<f64>;
pub type Table = GroupTable<f64>;
pub type RationalTable = GroupTable<Rational>;
pub type Srm = SrmResult<f64>;
