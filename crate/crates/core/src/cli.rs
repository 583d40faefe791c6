//! Command-line front end.
//!
//! Exit codes: 0 clean run, 1 usage or I/O error, 2 an SRM check failed,
//! 3 more violations than `--max-violations`. A violation overflow takes
//! precedence over an SRM failure.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crate::estimators::{
    estimate_group_rates, estimate_play_propensity, ipw_play_effect, itt_reference, itt_reweighted, itt_triggered,
    EffectEstimate, EstimateError, GroupTable, RateKind, Reference,
};
use crate::funnel::{build_funnel_with, compute_rates, BuildOptions, Stage};
use crate::ingest::{parse_event_log, parse_outcomes, parse_outcomes_csv, write_event_log, write_outcomes};
use crate::report::{ConfigEcho, EstimatorFailure, InputDigest, Metadata, OutcomeSummary, Report, ViolationSummary};
use crate::simulator::{simulate, SimScenario};
use crate::srm::{srm_scan, DesignRatio, DEFAULT_ALPHA};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_SRM_FAIL: i32 = 2;
pub const EXIT_VIOLATIONS: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "funnelscope", version, about = "Experiment funnel reports and simulations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Reconcile a log, run SRM checks and estimate effects.
    Report(ReportArgs),
    /// Generate a synthetic experiment from a scenario file.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Text,
}

#[derive(Debug, clap::Args)]
pub struct ReportArgs {
    /// Newline-delimited JSON event log.
    #[arg(long)]
    pub events: PathBuf,
    /// Outcomes as NDJSON, or CSV when the file name ends in `.csv`.
    #[arg(long)]
    pub outcomes: PathBuf,
    /// Targeted population size, when the log has no targeted events.
    #[arg(long)]
    pub n_targeted: Option<u64>,
    #[arg(long, default_value = "1:1")]
    pub design_ratio: String,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Comma-separated: itt, reweighted:TABLE_PATH, allocation-ref, target-ref, ipw.
    #[arg(long, default_value = "itt")]
    pub estimators: String,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Report every allocated unit without an outcome as a violation.
    #[arg(long)]
    pub strict_outcomes: bool,
    /// Exit with code 3 when more violations than this are found.
    #[arg(long, default_value_t = 0)]
    pub max_violations: usize,
    /// Write the report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct SimulateArgs {
    /// TOML scenario file.
    #[arg(long)]
    pub scenario: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Writes PREFIX.events.ndjson, PREFIX.outcomes.ndjson and PREFIX.truth.json.
    #[arg(long)]
    pub out_prefix: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EstimatorSpec {
    Itt,
    Reweighted(PathBuf),
    AllocationRef,
    TargetRef,
    Ipw,
}

impl FromStr for EstimatorSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "itt" => Ok(EstimatorSpec::Itt),
            "allocation-ref" => Ok(EstimatorSpec::AllocationRef),
            "target-ref" => Ok(EstimatorSpec::TargetRef),
            "ipw" => Ok(EstimatorSpec::Ipw),
            other => match other.strip_prefix("reweighted:") {
                Some(path) if !path.is_empty() => Ok(EstimatorSpec::Reweighted(PathBuf::from(path))),
                _ => bail!("unknown estimator `{other}`"),
            },
        }
    }
}

impl EstimatorSpec {
    fn label(&self) -> String {
        match self {
            EstimatorSpec::Itt => "itt".into(),
            EstimatorSpec::Reweighted(path) => format!("reweighted:{}", path.display()),
            EstimatorSpec::AllocationRef => "allocation-ref".into(),
            EstimatorSpec::TargetRef => "target-ref".into(),
            EstimatorSpec::Ipw => "ipw".into(),
        }
    }
}

pub fn parse_estimators(list: &str) -> anyhow::Result<Vec<EstimatorSpec>> {
    let specs: Vec<EstimatorSpec> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    if specs.is_empty() {
        bail!("no estimators requested");
    }
    Ok(specs)
}

/// A `{"group": rate, ...}` JSON object.
pub fn read_rate_table(path: &Path) -> anyhow::Result<GroupTable<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading rate table {}", path.display()))?;
    let values: BTreeMap<String, f64> =
        serde_json::from_str(&text).with_context(|| format!("parsing rate table {}", path.display()))?;
    GroupTable::new(RateKind::Custom, values).map_err(|e| anyhow!("rate table {}: {e}", path.display()))
}

fn digest(role: &str, path: &Path, bytes: &[u8]) -> InputDigest {
    InputDigest {
        role: role.to_string(),
        path: path.display().to_string(),
        bytes: bytes.len() as u64,
        sha256: hex::encode(Sha256::digest(bytes)),
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn run_estimator(
    spec: &EstimatorSpec,
    snapshot: &crate::funnel::FunnelSnapshot<f64>,
) -> anyhow::Result<Result<EffectEstimate<f64>, EstimateError>> {
    Ok(match spec {
        EstimatorSpec::Itt => itt_triggered(snapshot),
        EstimatorSpec::AllocationRef => itt_reference(snapshot, &Reference::Allocation),
        EstimatorSpec::TargetRef => itt_reference(snapshot, &Reference::Target),
        EstimatorSpec::Reweighted(path) => {
            let target = read_rate_table(path)?;
            estimate_group_rates(snapshot, Stage::Allocated, Stage::Triggered)
                .and_then(|observed| itt_reweighted(snapshot, &observed, &target))
        }
        EstimatorSpec::Ipw => estimate_play_propensity(snapshot).and_then(|p| ipw_play_effect(snapshot, &p)),
    })
}

/// Runs the full report pipeline. `Err` means a usage or I/O problem.
pub fn build_report(args: &ReportArgs) -> anyhow::Result<Report> {
    let ratio: DesignRatio<f64> = args.design_ratio.parse()?;
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        bail!("--alpha must lie strictly between 0 and 1");
    }
    let estimators = parse_estimators(&args.estimators)?;

    let event_bytes = fs::read(&args.events).with_context(|| format!("reading {}", args.events.display()))?;
    let outcome_bytes = fs::read(&args.outcomes).with_context(|| format!("reading {}", args.outcomes.display()))?;

    let events = parse_event_log(&event_bytes[..])?;
    let is_csv = args
        .outcomes
        .extension()
        .is_some_and(|ext| ext.eq_ignore_ascii_case("csv"));
    let outcomes = if is_csv {
        parse_outcomes_csv::<f64, _>(&outcome_bytes[..])?
    } else {
        parse_outcomes::<f64, _>(&outcome_bytes[..])?
    };

    let options = BuildOptions {
        strict_outcomes: args.strict_outcomes,
        ..BuildOptions::default()
    };
    let (mut snapshot, build_violations) = build_funnel_with(&events.records, &outcomes.records, &options);
    if let Some(n) = args.n_targeted {
        snapshot = snapshot.with_n_targeted(n)?;
    }

    let mut violations = events.violations;
    violations.extend(outcomes.violations);
    violations.extend(build_violations);

    let rates = compute_rates(&snapshot);
    let srm = srm_scan(&snapshot, ratio, args.alpha)?;

    let mut estimates = Vec::new();
    let mut estimator_errors = Vec::new();
    for spec in &estimators {
        match run_estimator(spec, &snapshot)? {
            Ok(estimate) => estimates.push(estimate),
            Err(err) => estimator_errors.push(EstimatorFailure {
                estimator: spec.label(),
                error: err.to_string(),
            }),
        }
    }

    Ok(Report {
        metadata: Metadata {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            generated_at_unix_ms: now_ms(),
            inputs: vec![
                digest("events", &args.events, &event_bytes),
                digest("outcomes", &args.outcomes, &outcome_bytes),
            ],
            config: ConfigEcho {
                n_targeted: args.n_targeted,
                design_ratio: args.design_ratio.clone(),
                alpha: args.alpha,
                estimators: estimators.iter().map(EstimatorSpec::label).collect(),
                strict_outcomes: args.strict_outcomes,
                max_violations: args.max_violations,
            },
            notes: vec![
                "SRM p-values are reported per stage without multiple-testing correction".into(),
                "confidence intervals are normal-theory at +/-1.96 standard errors".into(),
            ],
        },
        funnel: snapshot.counts().clone(),
        rates,
        srm,
        estimates,
        estimator_errors,
        outcomes: OutcomeSummary {
            imputed_zeros: snapshot.imputed_outcomes(),
            unmatched_records: snapshot.unmatched_outcomes(),
            excluded_units: snapshot.excluded().len(),
        },
        violations: ViolationSummary::from_violations(&violations),
    })
}

pub fn exit_code(report: &Report, max_violations: usize) -> i32 {
    if report.violations.total > max_violations {
        EXIT_VIOLATIONS
    } else if report.srm_failed() {
        EXIT_SRM_FAIL
    } else {
        EXIT_OK
    }
}

fn cmd_report(args: &ReportArgs) -> anyhow::Result<i32> {
    let report = build_report(args)?;
    for failure in &report.estimator_errors {
        eprintln!("warning: {} failed: {}", failure.estimator, failure.error);
    }
    let rendered = match args.format {
        Format::Json => report.to_json(),
        Format::Text => report.to_text(),
    };
    match &args.out {
        Some(path) => fs::write(path, rendered).with_context(|| format!("writing {}", path.display()))?,
        None => io::stdout().lock().write_all(rendered.as_bytes())?,
    }
    Ok(exit_code(&report, args.max_violations))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn cmd_simulate(args: &SimulateArgs) -> anyhow::Result<i32> {
    let mut scenario = SimScenario::from_path(&args.scenario)
        .with_context(|| format!("loading scenario {}", args.scenario.display()))?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    let output = simulate(&scenario)?;

    let events_path = with_suffix(&args.out_prefix, ".events.ndjson");
    let outcomes_path = with_suffix(&args.out_prefix, ".outcomes.ndjson");
    let truth_path = with_suffix(&args.out_prefix, ".truth.json");

    let create = |path: &Path| {
        fs::File::create(path)
            .map(io::BufWriter::new)
            .with_context(|| format!("creating {}", path.display()))
    };
    write_event_log(create(&events_path)?, &output.events)?;
    write_outcomes(create(&outcomes_path)?, &output.outcomes)?;
    let mut truth = serde_json::to_string_pretty(&output.truth)?;
    truth.push('\n');
    fs::write(&truth_path, truth).with_context(|| format!("writing {}", truth_path.display()))?;

    eprintln!(
        "wrote {} events and {} outcomes (seed {})",
        output.events.len(),
        output.outcomes.len(),
        scenario.seed
    );
    Ok(EXIT_OK)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Report(args) => cmd_report(args),
        Command::Simulate(args) => cmd_simulate(args),
    };
    result.unwrap_or_else(|err| {
        eprintln!("error: {err:#}");
        EXIT_USAGE
    })
}
