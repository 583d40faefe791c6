//! Newline-delimited event and outcome logs.
//!
//! Event line:
//!
//! ```json
//! {"unit_id":"u1","stage":"triggered","assignment":"treatment","group":"g1","ts":170000}
//! ```
//!
//! Outcome line: `{"unit_id":"u1","outcome":12.5,"played":true}`. Outcomes
//! may also come as CSV with header `unit_id,outcome,played`.
//!
//! Malformed lines never abort a parse; they become located
//! [`Violation`]s and are skipped. Unknown JSON fields are ignored.

use std::collections::HashSet;
use std::fmt;
use std::io::{self, BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::funnel::{Assignment, FunnelEvent, FunnelSnapshot, OutcomeRecord, Stage, DEFAULT_GROUP};
use crate::num::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    TreatedWithoutTriggered,
    TreatedWithoutActivated,
    ActivatedWithoutAllocated,
    TriggeredWithoutAllocated,
    AssignmentConflict,
    MalformedRecord,
    DuplicateOutcome,
    MissingOutcome,
}

impl ViolationKind {
    pub const ALL: [ViolationKind; 8] = [
        ViolationKind::TreatedWithoutTriggered,
        ViolationKind::TreatedWithoutActivated,
        ViolationKind::ActivatedWithoutAllocated,
        ViolationKind::TriggeredWithoutAllocated,
        ViolationKind::AssignmentConflict,
        ViolationKind::MalformedRecord,
        ViolationKind::DuplicateOutcome,
        ViolationKind::MissingOutcome,
    ];

    /// Kind reported when `stage` was logged but `required` was not.
    ///
    /// Panics on pairs that are not prerequisite rules.
    pub fn missing_prerequisite(stage: Stage, required: Stage) -> Self {
        match (stage, required) {
            (Stage::Treated, Stage::Triggered) => ViolationKind::TreatedWithoutTriggered,
            (Stage::Treated, Stage::Activated) => ViolationKind::TreatedWithoutActivated,
            (Stage::Activated, Stage::Allocated) => ViolationKind::ActivatedWithoutAllocated,
            (Stage::Triggered, Stage::Allocated) => ViolationKind::TriggeredWithoutAllocated,
            _ => panic!("no prerequisite rule {stage} -> {required}"),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ViolationKind::TreatedWithoutTriggered => "treated-without-triggered",
            ViolationKind::TreatedWithoutActivated => "treated-without-activated",
            ViolationKind::ActivatedWithoutAllocated => "activated-without-allocated",
            ViolationKind::TriggeredWithoutAllocated => "triggered-without-allocated",
            ViolationKind::AssignmentConflict => "assignment-conflict",
            ViolationKind::MalformedRecord => "malformed-record",
            ViolationKind::DuplicateOutcome => "duplicate-outcome",
            ViolationKind::MissingOutcome => "missing-outcome",
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            ViolationKind::TreatedWithoutTriggered => "treated event without a triggered event",
            ViolationKind::TreatedWithoutActivated => "treated event without an activated event",
            ViolationKind::ActivatedWithoutAllocated => "activated event without an allocated event",
            ViolationKind::TriggeredWithoutAllocated => "triggered event without an allocated event",
            ViolationKind::AssignmentConflict => "conflicting assignments",
            ViolationKind::MalformedRecord => "malformed record",
            ViolationKind::DuplicateOutcome => "duplicate outcome record",
            ViolationKind::MissingOutcome => "missing outcome record",
        }
    }
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unit_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line_number: Option<u64>,
    pub message: String,
}

impl Violation {
    pub fn for_unit(kind: ViolationKind, unit_id: &str, message: impl Into<String>) -> Self {
        Self {
            kind,
            unit_id: Some(unit_id.to_string()),
            line_number: None,
            message: message.into(),
        }
    }

    fn at_line(kind: ViolationKind, line: u64, unit_id: Option<String>, message: impl Into<String>) -> Self {
        Self {
            kind,
            unit_id,
            line_number: Some(line),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)?;
        if let Some(line) = self.line_number {
            write!(f, " at line {line}")?;
        }
        if let Some(unit) = &self.unit_id {
            write!(f, " (unit {unit})")?;
        }
        write!(f, ": {}", self.message)
    }
}

/// Records recovered from a stream together with the lines that were rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct Parsed<T> {
    pub records: Vec<T>,
    pub violations: Vec<Violation>,
}

impl<T> Default for Parsed<T> {
    fn default() -> Self {
        Self {
            records: Vec::new(),
            violations: Vec::new(),
        }
    }
}

#[derive(Deserialize)]
struct RawEvent {
    unit_id: String,
    stage: Stage,
    #[serde(default)]
    assignment: Option<Assignment>,
    #[serde(default)]
    group: Option<String>,
    ts: i64,
}

#[derive(Serialize)]
struct EventLine<'a> {
    unit_id: &'a str,
    stage: Stage,
    #[serde(skip_serializing_if = "Option::is_none")]
    assignment: Option<Assignment>,
    group: &'a str,
    ts: i64,
}

#[derive(Deserialize)]
struct RawOutcome {
    unit_id: String,
    outcome: f64,
    #[serde(default)]
    played: Option<bool>,
}

/// Best effort extraction of `unit_id` from a rejected line, for context.
fn unit_hint(line: &[u8]) -> Option<String> {
    let value: serde_json::Value = serde_json::from_slice(line).ok()?;
    value.get("unit_id")?.as_str().map(str::to_string)
}

/// Calls `f` with every non-blank line and its 1-based number.
fn for_each_line<R: Read>(input: R, mut f: impl FnMut(u64, &[u8])) -> io::Result<()> {
    let mut reader = io::BufReader::new(input);
    let mut buf = Vec::new();
    let mut line_number = 0u64;
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf)? == 0 {
            return Ok(());
        }
        line_number += 1;
        let line = buf.trim_ascii();
        if !line.is_empty() {
            f(line_number, line);
        }
    }
}

pub fn parse_event_log<R: Read>(input: R) -> io::Result<Parsed<FunnelEvent>> {
    let mut parsed = Parsed::default();
    for_each_line(input, |line_number, line| match serde_json::from_slice::<RawEvent>(line) {
        Ok(raw) => {
            let group = raw.group.unwrap_or_else(|| DEFAULT_GROUP.to_string());
            let assignment = if raw.stage.requires_assignment() {
                raw.assignment
            } else {
                None
            };
            match FunnelEvent::new(raw.unit_id.clone(), raw.stage, assignment, group, raw.ts) {
                Ok(event) => parsed.records.push(event),
                Err(err) => parsed.violations.push(Violation::at_line(
                    ViolationKind::MalformedRecord,
                    line_number,
                    Some(raw.unit_id),
                    err.to_string(),
                )),
            }
        }
        Err(err) => parsed.violations.push(Violation::at_line(
            ViolationKind::MalformedRecord,
            line_number,
            unit_hint(line),
            err.to_string(),
        )),
    })?;
    Ok(parsed)
}

fn push_outcome<F: Real>(
    parsed: &mut Parsed<OutcomeRecord<F>>,
    seen: &mut HashSet<String>,
    line_number: u64,
    unit_id: String,
    outcome: f64,
    played: bool,
) {
    let Some(value) = F::from_f64(outcome).filter(|v| v.is_finite()) else {
        parsed.violations.push(Violation::at_line(
            ViolationKind::MalformedRecord,
            line_number,
            Some(unit_id),
            format!("outcome {outcome} is not representable"),
        ));
        return;
    };
    if !seen.insert(unit_id.clone()) {
        parsed.violations.push(Violation::at_line(
            ViolationKind::DuplicateOutcome,
            line_number,
            Some(unit_id),
            "duplicate outcome record; keeping the first",
        ));
        return;
    }
    parsed.records.push(OutcomeRecord::new(unit_id, value, played));
}

pub fn parse_outcomes<F: Real, R: Read>(input: R) -> io::Result<Parsed<OutcomeRecord<F>>> {
    let mut parsed = Parsed::default();
    let mut seen = HashSet::new();
    for_each_line(input, |line_number, line| match serde_json::from_slice::<RawOutcome>(line) {
        Ok(raw) => push_outcome(
            &mut parsed,
            &mut seen,
            line_number,
            raw.unit_id,
            raw.outcome,
            raw.played.unwrap_or(false),
        ),
        Err(err) => parsed.violations.push(Violation::at_line(
            ViolationKind::MalformedRecord,
            line_number,
            unit_hint(line),
            err.to_string(),
        )),
    })?;
    Ok(parsed)
}

/// Outcomes from CSV with header `unit_id,outcome,played`. The `played`
/// column may be omitted or left empty (false).
pub fn parse_outcomes_csv<F: Real, R: Read>(input: R) -> io::Result<Parsed<OutcomeRecord<F>>> {
    let mut parsed = Parsed::default();
    let mut seen = HashSet::new();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(input);

    let headers = match reader.headers() {
        Ok(h) => h.clone(),
        Err(err) => return Err(csv_io_error(err)),
    };
    if headers.is_empty() {
        return Ok(parsed);
    }
    let column = |name: &str| headers.iter().position(|h| h == name);
    let (Some(unit_col), Some(outcome_col)) = (column("unit_id"), column("outcome")) else {
        parsed.violations.push(Violation::at_line(
            ViolationKind::MalformedRecord,
            1,
            None,
            "CSV header must contain unit_id and outcome",
        ));
        return Ok(parsed);
    };
    let played_col = column("played");

    for record in reader.records() {
        let record = match record {
            Ok(r) => r,
            Err(err) if err.is_io_error() => return Err(csv_io_error(err)),
            Err(err) => {
                let line = err.position().map_or(0, |p| p.line());
                parsed.violations.push(Violation::at_line(
                    ViolationKind::MalformedRecord,
                    line,
                    None,
                    err.to_string(),
                ));
                continue;
            }
        };
        let line = record.position().map_or(0, |p| p.line());
        let unit_id = record.get(unit_col).unwrap_or("").to_string();
        if unit_id.is_empty() {
            parsed.violations.push(Violation::at_line(
                ViolationKind::MalformedRecord,
                line,
                None,
                "missing unit_id",
            ));
            continue;
        }
        let outcome = match record.get(outcome_col).map(str::parse::<f64>) {
            Some(Ok(v)) if v.is_finite() => v,
            _ => {
                parsed.violations.push(Violation::at_line(
                    ViolationKind::MalformedRecord,
                    line,
                    Some(unit_id),
                    "outcome is not a finite number",
                ));
                continue;
            }
        };
        let played = match played_col.and_then(|c| record.get(c)).unwrap_or("") {
            "" | "false" | "0" => false,
            "true" | "1" => true,
            other => {
                parsed.violations.push(Violation::at_line(
                    ViolationKind::MalformedRecord,
                    line,
                    Some(unit_id),
                    format!("played must be a boolean, got `{other}`"),
                ));
                continue;
            }
        };
        push_outcome(&mut parsed, &mut seen, line, unit_id, outcome, played);
    }
    Ok(parsed)
}

fn csv_io_error(err: csv::Error) -> io::Error {
    match err.into_kind() {
        csv::ErrorKind::Io(e) => e,
        other => io::Error::new(io::ErrorKind::InvalidData, format!("{other:?}")),
    }
}

/// One violation per unit per violated subset rule; empty iff every unit
/// respects the stage containment rules.
pub fn validate_funnel<F: Copy + num_traits::Zero>(snapshot: &FunnelSnapshot<F>) -> Vec<Violation> {
    snapshot
        .units()
        .iter()
        .flat_map(|unit| {
            unit.stage_violations()
                .into_iter()
                .map(|kind| Violation::for_unit(kind, &unit.unit_id, kind.describe()))
        })
        .collect()
}

pub fn write_event_log<W: Write>(mut out: W, events: &[FunnelEvent]) -> io::Result<()> {
    for event in events {
        let line = EventLine {
            unit_id: &event.unit_id,
            stage: event.stage,
            assignment: event.assignment,
            group: &event.group,
            ts: event.timestamp,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn write_outcomes<F: Real + Serialize, W: Write>(mut out: W, outcomes: &[OutcomeRecord<F>]) -> io::Result<()> {
    for record in outcomes {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
