//! Report assembly: funnel counts, rates, SRM scan, estimates and a
//! violation summary, serialized as JSON or as a fixed-width text summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::estimators::EffectEstimate;
use crate::funnel::{FunnelCounts, FunnelRates};
use crate::ingest::{Violation, ViolationKind};
use crate::srm::{SrmResult, Verdict};

/// Violations listed individually; the rest are only counted.
pub const MAX_DETAILED_VIOLATIONS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InputDigest {
    pub role: String,
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConfigEcho {
    pub n_targeted: Option<u64>,
    pub design_ratio: String,
    pub alpha: f64,
    pub estimators: Vec<String>,
    pub strict_outcomes: bool,
    pub max_violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metadata {
    pub tool: String,
    pub version: String,
    /// The only field that changes between identical runs.
    pub generated_at_unix_ms: u64,
    pub inputs: Vec<InputDigest>,
    pub config: ConfigEcho,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OutcomeSummary {
    pub imputed_zeros: usize,
    pub unmatched_records: usize,
    pub excluded_units: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimatorFailure {
    pub estimator: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ViolationSummary {
    pub total: usize,
    pub by_kind: BTreeMap<ViolationKind, usize>,
    pub details: Vec<Violation>,
}

impl ViolationSummary {
    pub fn from_violations(violations: &[Violation]) -> Self {
        let mut by_kind = BTreeMap::new();
        for v in violations {
            *by_kind.entry(v.kind).or_insert(0) += 1;
        }
        Self {
            total: violations.len(),
            by_kind,
            details: violations.iter().take(MAX_DETAILED_VIOLATIONS).cloned().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub metadata: Metadata,
    pub funnel: FunnelCounts,
    pub rates: FunnelRates<f64>,
    pub srm: Vec<SrmResult<f64>>,
    pub estimates: Vec<EffectEstimate<f64>>,
    pub estimator_errors: Vec<EstimatorFailure>,
    pub outcomes: OutcomeSummary,
    pub violations: ViolationSummary,
}

impl Report {
    pub fn srm_failed(&self) -> bool {
        self.srm.iter().any(|r| r.verdict == Verdict::Fail)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let m = &self.metadata;
        let _ = writeln!(out, "{} {}", m.tool, m.version);
        for input in &m.inputs {
            let _ = writeln!(out, "{:<10} {} ({} bytes, sha256 {})", input.role, input.path, input.bytes, input.sha256);
        }

        let _ = writeln!(out, "\nFUNNEL            treatment      control        total");
        let f = &self.funnel;
        match f.targeted {
            Some(n) => {
                let _ = writeln!(out, "{:<12} {:>12} {:>12} {:>12}", "targeted", "-", "-", n);
            }
            None => {
                let _ = writeln!(out, "{:<12} {:>12} {:>12} {:>12}", "targeted", "-", "-", "unknown");
            }
        }
        for (name, arms) in [
            ("allocated", &f.allocated),
            ("activated", &f.activated),
            ("triggered", &f.triggered),
            ("treated", &f.treated),
        ] {
            let _ = writeln!(out, "{:<12} {:>12} {:>12} {:>12}", name, arms.treatment, arms.control, arms.total());
        }

        let rate = |r: Option<f64>| r.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(out, "\nRATES");
        let r = &self.rates;
        for (name, value) in [
            ("allocation", r.allocation_rate),
            ("activation", r.activation_rate),
            ("trigger", r.trigger_rate),
            ("compliance", r.compliance_rate),
        ] {
            let _ = writeln!(out, "{:<12} {:>12}", name, rate(value));
        }

        let _ = writeln!(out, "\nSRM          treatment      control         chi2      p_value  verdict");
        for s in &self.srm {
            let stage = s.stage.map_or("-".to_string(), |st| st.to_string());
            let _ = writeln!(
                out,
                "{:<12} {:>9} {:>12} {:>12.4} {:>12.4e}  {}",
                stage, s.observed[0], s.observed[1], s.chi2, s.p_value, s.verdict
            );
        }

        let _ = writeln!(out, "\nESTIMATES            point    std_error         ci_low        ci_high");
        for e in &self.estimates {
            let _ = writeln!(
                out,
                "{:<18} {:>12.6} {:>12.6} {:>14.6} {:>14.6}",
                e.estimand.to_string(),
                e.point,
                e.std_error,
                e.ci_95[0],
                e.ci_95[1]
            );
        }
        for failure in &self.estimator_errors {
            let _ = writeln!(out, "{:<18} error: {}", failure.estimator, failure.error);
        }

        let o = &self.outcomes;
        let _ = writeln!(
            out,
            "\nOUTCOMES     imputed zeros {}, unmatched records {}, excluded units {}",
            o.imputed_zeros, o.unmatched_records, o.excluded_units
        );
        let _ = writeln!(out, "VIOLATIONS   {}", self.violations.total);
        for (kind, n) in &self.violations.by_kind {
            let _ = writeln!(out, "  {:<28} {:>8}", kind.as_str(), n);
        }
        for note in &m.notes {
            let _ = writeln!(out, "note: {note}");
        }
        out
    }
}
