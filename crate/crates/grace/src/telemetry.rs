//! Usage accounting, cost estimation, and run-directory persistence.
//!
//! Every gateway attempt lands in an append-only call log and, on
//! success, in the per-role [`UsageLedger`]. Ledger totals are always the
//! componentwise sum of logged usages, so they can be reconstructed from
//! the log. Costs are computed in exact rational dollars from a per-role
//! price table (per-million-token input/output rates); a role can be
//! marked `reasoning_excluded` to drop its reasoning-channel tokens from
//! billable output.
//!
//! A run directory holds five artifacts: `trace.log` (one JSON step event
//! per line), `calls.log` (one JSON call record per line), `ledger.json`
//! (totals plus cost summary), `best_prompt.txt`, and `checkpoint.json`.
//! Trace and call lines are flushed per event so a killed run loses at
//! most the in-flight step.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use num::bigint::BigInt;
use num::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Role, Usage};
use crate::scoring::{rational_serde, Rational};

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("no price configured for role {0} but its ledger has activity")]
    MissingPrice(Role),
    #[error("{path} line {line}: {message}")]
    Corrupt {
        path: String,
        line: usize,
        message: String,
    },
}

/// Per-role usage totals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleTotals {
    pub api_calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub reasoning_tokens: u64,
    /// Calls whose token counts were estimated rather than reported.
    pub estimated_calls: u64,
}

impl RoleTotals {
    fn record(&mut self, usage: &Usage) {
        self.api_calls += usage.api_calls;
        self.input_tokens += usage.input_tokens;
        self.output_tokens += usage.output_tokens;
        self.reasoning_tokens += usage.reasoning_tokens;
        if usage.estimated {
            self.estimated_calls += 1;
        }
    }

    fn add(&self, other: &Self) -> Self {
        Self {
            api_calls: self.api_calls + other.api_calls,
            input_tokens: self.input_tokens + other.input_tokens,
            output_tokens: self.output_tokens + other.output_tokens,
            reasoning_tokens: self.reasoning_tokens + other.reasoning_tokens,
            estimated_calls: self.estimated_calls + other.estimated_calls,
        }
    }

    fn has_activity(&self) -> bool {
        *self != Self::default()
    }
}

/// Per-role API-call and token totals for a run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageLedger {
    pub base: RoleTotals,
    pub optimizer: RoleTotals,
}

impl UsageLedger {
    pub fn record(&mut self, role: Role, usage: &Usage) {
        match role {
            Role::Base => self.base.record(usage),
            Role::Optimizer => self.optimizer.record(usage),
        }
    }

    pub fn role(&self, role: Role) -> &RoleTotals {
        match role {
            Role::Base => &self.base,
            Role::Optimizer => &self.optimizer,
        }
    }

    pub fn is_empty(&self) -> bool {
        !self.base.has_activity() && !self.optimizer.has_activity()
    }

    /// Componentwise sum; cost estimation is linear over this.
    pub fn add(&self, other: &Self) -> Self {
        Self {
            base: self.base.add(&other.base),
            optimizer: self.optimizer.add(&other.optimizer),
        }
    }
}

/// Per-role dollar rates per million tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolePricing {
    #[serde(with = "rational_serde")]
    pub input_per_million: Rational,
    #[serde(with = "rational_serde")]
    pub output_per_million: Rational,
    /// Exclude reasoning-channel tokens from billable output (some vendors
    /// meter them separately).
    #[serde(default)]
    pub reasoning_excluded: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PricingTable {
    pub base: Option<RolePricing>,
    pub optimizer: Option<RolePricing>,
}

impl PricingTable {
    pub fn role(&self, role: Role) -> Option<&RolePricing> {
        match role {
            Role::Base => self.base.as_ref(),
            Role::Optimizer => self.optimizer.as_ref(),
        }
    }
}

/// Exact dollar estimate per role plus the run total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    #[serde(with = "rational_serde")]
    pub base: Rational,
    #[serde(with = "rational_serde")]
    pub optimizer: Rational,
    #[serde(with = "rational_serde")]
    pub total: Rational,
}

impl CostBreakdown {
    pub fn total_dollars(&self) -> f64 {
        self.total.to_f64().unwrap_or(f64::NAN)
    }
}

/// Dollars for one role's totals under its pricing.
fn role_cost(totals: &RoleTotals, pricing: &RolePricing) -> Rational {
    let million = Rational::from(BigInt::from(1_000_000u64));
    let billable_output = if pricing.reasoning_excluded {
        totals.output_tokens.saturating_sub(totals.reasoning_tokens)
    } else {
        totals.output_tokens
    };
    let input = Rational::from(BigInt::from(totals.input_tokens));
    let output = Rational::from(BigInt::from(billable_output));
    (input * pricing.input_per_million.clone() + output * pricing.output_per_million.clone())
        / million
}

/// Estimate dollar cost of a ledger under a price table.
///
/// Every role with activity must be priced; inactive roles cost zero.
pub fn estimate_cost(
    ledger: &UsageLedger,
    pricing: &PricingTable,
) -> Result<CostBreakdown, TelemetryError> {
    let mut per_role = [Rational::zero(), Rational::zero()];
    for (i, role) in [Role::Base, Role::Optimizer].into_iter().enumerate() {
        let totals = ledger.role(role);
        match pricing.role(role) {
            Some(p) => per_role[i] = role_cost(totals, p),
            None if totals.has_activity() => return Err(TelemetryError::MissingPrice(role)),
            None => {}
        }
    }
    let [base, optimizer] = per_role;
    let total = base.clone() + optimizer.clone();
    Ok(CostBreakdown {
        base,
        optimizer,
        total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallOutcome {
    Ok,
    RetryableError,
    FatalError,
}

/// One line of `calls.log`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CallLogEntry {
    pub seq: u64,
    pub role: Role,
    pub tag: String,
    pub attempt: u32,
    pub outcome: CallOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
}

struct TelemetryInner {
    ledger: UsageLedger,
    log: Vec<CallLogEntry>,
    seq: u64,
    calls_file: Option<BufWriter<File>>,
    trace_path: Option<PathBuf>,
    trace_file: Option<BufWriter<File>>,
}

/// Serialized recorder shared by the gateway and the run loop.
pub struct Telemetry {
    inner: Mutex<TelemetryInner>,
}

impl Telemetry {
    pub fn in_memory() -> Self {
        Self {
            inner: Mutex::new(TelemetryInner {
                ledger: UsageLedger::default(),
                log: Vec::new(),
                seq: 0,
                calls_file: None,
                trace_path: None,
                trace_file: None,
            }),
        }
    }

    /// Telemetry that appends `calls.log` and `trace.log` in `dir`.
    pub fn with_run_dir(dir: &RunDir) -> Result<Self, TelemetryError> {
        let calls = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.calls_path())?;
        let trace = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.trace_path())?;
        let telemetry = Self::in_memory();
        {
            let mut inner = telemetry.inner.lock().expect("telemetry lock");
            inner.calls_file = Some(BufWriter::new(calls));
            inner.trace_path = Some(dir.trace_path());
            inner.trace_file = Some(BufWriter::new(trace));
        }
        Ok(telemetry)
    }

    pub(crate) fn record_success(
        &self,
        role: Role,
        tag: &str,
        attempt: u32,
        usage: &Usage,
        provider: &str,
        latency_ms: u64,
    ) {
        let mut inner = self.inner.lock().expect("telemetry lock");
        inner.ledger.record(role, usage);
        inner.seq += 1;
        let entry = CallLogEntry {
            seq: inner.seq,
            role,
            tag: tag.to_string(),
            attempt,
            outcome: CallOutcome::Ok,
            detail: None,
            usage: Some(*usage),
            provider: Some(provider.to_string()),
            latency_ms: Some(latency_ms),
        };
        write_call_line(&mut inner, &entry);
        inner.log.push(entry);
    }

    pub(crate) fn record_failed_attempt(
        &self,
        role: Role,
        tag: &str,
        attempt: u32,
        fatal: bool,
        detail: &str,
    ) {
        let mut inner = self.inner.lock().expect("telemetry lock");
        inner.seq += 1;
        let entry = CallLogEntry {
            seq: inner.seq,
            role,
            tag: tag.to_string(),
            attempt,
            outcome: if fatal {
                CallOutcome::FatalError
            } else {
                CallOutcome::RetryableError
            },
            detail: Some(detail.to_string()),
            usage: None,
            provider: None,
            latency_ms: None,
        };
        write_call_line(&mut inner, &entry);
        inner.log.push(entry);
    }

    pub fn ledger(&self) -> UsageLedger {
        self.inner.lock().expect("telemetry lock").ledger.clone()
    }

    /// Replace the ledger with a checkpointed snapshot when resuming.
    pub fn restore_ledger(&self, ledger: UsageLedger) {
        self.inner.lock().expect("telemetry lock").ledger = ledger;
    }

    pub fn call_log(&self) -> Vec<CallLogEntry> {
        self.inner.lock().expect("telemetry lock").log.clone()
    }

    /// Append one line to `trace.log` (no-op without a run directory).
    pub fn append_trace_line(&self, line: &str) -> Result<(), TelemetryError> {
        let mut inner = self.inner.lock().expect("telemetry lock");
        if let Some(writer) = inner.trace_file.as_mut() {
            writeln!(writer, "{line}")?;
            writer.flush()?;
        }
        Ok(())
    }

    /// Replace `trace.log` wholesale (used on resume, so the final file is
    /// byte-identical to an uninterrupted run's).
    pub fn rewrite_trace_lines(&self, lines: &[String]) -> Result<(), TelemetryError> {
        let mut inner = self.inner.lock().expect("telemetry lock");
        let Some(path) = inner.trace_path.clone() else {
            return Ok(());
        };
        let file = File::create(&path)?;
        let mut writer = BufWriter::new(file);
        for line in lines {
            writeln!(writer, "{line}")?;
        }
        writer.flush()?;
        inner.trace_file = Some(writer);
        Ok(())
    }
}

fn write_call_line(inner: &mut TelemetryInner, entry: &CallLogEntry) {
    if let Some(writer) = inner.calls_file.as_mut() {
        // Call records are diagnostics; losing one to a full disk should
        // not kill the run.
        let _ = serde_json::to_string(entry)
            .map(|line| writeln!(writer, "{line}").and_then(|_| writer.flush()));
    }
}

// ---------------------------------------------------------------------------
// Run directory
// ---------------------------------------------------------------------------

pub const TRACE_FILE: &str = "trace.log";
pub const CALLS_FILE: &str = "calls.log";
pub const LEDGER_FILE: &str = "ledger.json";
pub const BEST_PROMPT_FILE: &str = "best_prompt.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Layout of a run's output directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Open (creating if needed) a run directory.
    pub fn create(path: &Path) -> Result<Self, TelemetryError> {
        std::fs::create_dir_all(path)?;
        Ok(Self {
            root: path.to_path_buf(),
        })
    }

    pub fn open(path: &Path) -> Self {
        Self {
            root: path.to_path_buf(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn trace_path(&self) -> PathBuf {
        self.root.join(TRACE_FILE)
    }

    pub fn calls_path(&self) -> PathBuf {
        self.root.join(CALLS_FILE)
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.root.join(LEDGER_FILE)
    }

    pub fn best_prompt_path(&self) -> PathBuf {
        self.root.join(BEST_PROMPT_FILE)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.root.join(CHECKPOINT_FILE)
    }

    pub fn has_checkpoint(&self) -> bool {
        self.checkpoint_path().is_file()
    }

    pub fn write_best_prompt(&self, text: &str) -> Result<(), TelemetryError> {
        std::fs::write(self.best_prompt_path(), text)?;
        Ok(())
    }

    /// Atomically serialize `value` to `name` via a temp file + rename.
    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), TelemetryError> {
        let tmp = self.root.join(format!(".{name}.tmp"));
        let json = serde_json::to_string_pretty(value)
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        std::fs::write(&tmp, json)?;
        std::fs::rename(&tmp, self.root.join(name))?;
        Ok(())
    }

    pub fn read_json<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<T, TelemetryError> {
        let path = self.root.join(name);
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| TelemetryError::Corrupt {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn write_ledger_summary(&self, summary: &LedgerSummary) -> Result<(), TelemetryError> {
        self.write_json(LEDGER_FILE, summary)
    }

    pub fn read_ledger_summary(&self) -> Result<LedgerSummary, TelemetryError> {
        self.read_json(LEDGER_FILE)
    }

    /// Parse `trace.log` into raw JSON lines, reporting the offending line
    /// on corruption.
    pub fn read_trace_values(&self) -> Result<Vec<serde_json::Value>, TelemetryError> {
        let path = self.trace_path();
        let file = File::open(&path)?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let value = serde_json::from_str(&line).map_err(|e| TelemetryError::Corrupt {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            out.push(value);
        }
        Ok(out)
    }
}

/// Contents of `ledger.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub ledger: UsageLedger,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pricing: Option<PricingTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostBreakdown>,
    /// Human-readable total, e.g. "$2.78".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_display: Option<String>,
}

impl LedgerSummary {
    pub fn new(ledger: UsageLedger, pricing: Option<PricingTable>) -> Self {
        let cost = pricing
            .as_ref()
            .and_then(|p| estimate_cost(&ledger, p).ok());
        let cost_display = cost.as_ref().map(|c| format!("${:.2}", c.total_dollars()));
        Self {
            ledger,
            pricing,
            cost,
            cost_display,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::parse_rational;

    fn usage(input: u64, output: u64) -> Usage {
        Usage {
            input_tokens: input,
            output_tokens: output,
            reasoning_tokens: 0,
            api_calls: 1,
            estimated: false,
        }
    }

    fn price(input: &str, output: &str) -> RolePricing {
        RolePricing {
            input_per_million: parse_rational(input).unwrap(),
            output_per_million: parse_rational(output).unwrap(),
            reasoning_excluded: false,
        }
    }

    #[test]
    fn single_call_totals() {
        let mut ledger = UsageLedger::default();
        ledger.record(Role::Base, &usage(100, 50));
        let totals = ledger.role(Role::Base);
        assert_eq!(
            (totals.api_calls, totals.input_tokens, totals.output_tokens),
            (1, 100, 50)
        );
    }

    #[test]
    fn totals_are_componentwise_sums() {
        let mut ledger = UsageLedger::default();
        ledger.record(Role::Base, &usage(100, 50));
        ledger.record(Role::Base, &usage(7, 3));
        let totals = ledger.role(Role::Base);
        assert_eq!(
            (totals.api_calls, totals.input_tokens, totals.output_tokens),
            (2, 107, 53)
        );
    }

    #[test]
    fn roles_accumulate_independently_and_match_the_log() {
        let telemetry = Telemetry::in_memory();
        telemetry.record_success(Role::Base, "a", 1, &usage(10, 1), "p", 0);
        telemetry.record_success(Role::Optimizer, "b", 1, &usage(20, 2), "p", 0);
        telemetry.record_success(Role::Base, "c", 1, &usage(30, 3), "p", 0);

        // Oracle: recount totals from the append-only call log.
        let mut recount = UsageLedger::default();
        for entry in telemetry.call_log() {
            if let Some(u) = entry.usage {
                recount.record(entry.role, &u);
            }
        }
        assert_eq!(recount, telemetry.ledger());
        assert_eq!(recount.role(Role::Base).input_tokens, 40);
        assert_eq!(recount.role(Role::Optimizer).input_tokens, 20);
    }

    #[test]
    fn cost_arithmetic() {
        let mut ledger = UsageLedger::default();
        ledger.record(Role::Base, &usage(2_000_000, 0));
        let pricing = PricingTable {
            base: Some(price("27/100", "11/10")),
            optimizer: None,
        };
        let cost = estimate_cost(&ledger, &pricing).unwrap();
        assert_eq!(cost.total, parse_rational("27/50").unwrap()); // $0.54
    }

    #[test]
    fn zero_ledger_costs_zero() {
        let pricing = PricingTable {
            base: Some(price("1", "1")),
            optimizer: Some(price("1", "1")),
        };
        let cost = estimate_cost(&UsageLedger::default(), &pricing).unwrap();
        assert!(cost.total.is_zero());
    }

    #[test]
    fn missing_price_for_active_role_errors() {
        let mut ledger = UsageLedger::default();
        ledger.record(Role::Optimizer, &usage(10, 10));
        let pricing = PricingTable {
            base: Some(price("1", "1")),
            optimizer: None,
        };
        assert!(matches!(
            estimate_cost(&ledger, &pricing),
            Err(TelemetryError::MissingPrice(Role::Optimizer))
        ));
    }

    #[test]
    fn reasoning_exclusion_drops_reasoning_tokens() {
        let mut ledger = UsageLedger::default();
        ledger.record(
            Role::Optimizer,
            &Usage {
                input_tokens: 0,
                output_tokens: 1_000_000,
                reasoning_tokens: 600_000,
                api_calls: 1,
                estimated: false,
            },
        );
        let mut pricing = PricingTable {
            base: None,
            optimizer: Some(price("0", "1")),
        };
        pricing.optimizer.as_mut().unwrap().reasoning_excluded = true;
        let cost = estimate_cost(&ledger, &pricing).unwrap();
        assert_eq!(cost.total, parse_rational("2/5").unwrap()); // 0.4M billable
    }

    #[test]
    fn cost_is_linear_in_the_ledger() {
        let mut a = UsageLedger::default();
        a.record(Role::Base, &usage(123_456, 789));
        a.record(Role::Optimizer, &usage(555, 777));
        let mut b = UsageLedger::default();
        b.record(Role::Base, &usage(1, 999_999));
        b.record(Role::Optimizer, &usage(31_337, 42));
        let pricing = PricingTable {
            base: Some(price("27/100", "11/10")),
            optimizer: Some(price("11/20", "219/100")),
        };
        let ca = estimate_cost(&a, &pricing).unwrap();
        let cb = estimate_cost(&b, &pricing).unwrap();
        let cab = estimate_cost(&a.add(&b), &pricing).unwrap();
        assert_eq!(cab.total, ca.total + cb.total);
    }

    #[test]
    fn run_dir_trace_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let run_dir = RunDir::create(dir.path()).unwrap();
        let telemetry = Telemetry::with_run_dir(&run_dir).unwrap();
        telemetry.append_trace_line("{\"step\":0}").unwrap();
        telemetry.append_trace_line("{\"step\":1}").unwrap();
        let values = run_dir.read_trace_values().unwrap();
        assert_eq!(values.len(), 2);
        assert_eq!(values[1]["step"], 1);

        telemetry
            .rewrite_trace_lines(&["{\"step\":9}".to_string()])
            .unwrap();
        let values = run_dir.read_trace_values().unwrap();
        assert_eq!(values.len(), 1);
        assert_eq!(values[0]["step"], 9);
    }

    #[test]
    fn corrupt_trace_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let run_dir = RunDir::create(dir.path()).unwrap();
        std::fs::write(run_dir.trace_path(), "{\"ok\":1}\nnot json\n").unwrap();
        match run_dir.read_trace_values() {
            Err(TelemetryError::Corrupt { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected corruption error, got {other:?}"),
        }
    }
}
