use std::fs;
use std::io;
use std::path::Path;

use ens_core::propcheck::{Conditions, PatternId, Property, Violation};
use ens_core::scenarios::Expectation;
use ens_core::worldmodel::PhoneId;
use serde::Serialize;

/// One checker finding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ViolationRecord {
    pub property: Property,
    pub witness_tick: u64,
    pub witness_seq: u64,
    pub failed_conditions: Conditions,
    pub binding: Option<PhoneId>,
    pub pattern: Option<PatternId>,
    pub evidence_ticks: Vec<u64>,
}

impl From<&Violation> for ViolationRecord {
    fn from(v: &Violation) -> Self {
        Self {
            property: v.property,
            witness_tick: v.witness.tick.0,
            witness_seq: v.witness.seq,
            failed_conditions: v.failed_conditions,
            binding: v.binding,
            pattern: v.pattern,
            evidence_ticks: v.evidence.iter().map(|e| e.tick.0).collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub protocol: &'static str,
    pub seed: u64,
    pub trace_path: Option<String>,
    pub trace_events: usize,
    pub expectation: String,
    pub violations: Vec<ViolationRecord>,
    pub alarms: usize,
    pub pass: bool,
    pub mismatch: Option<String>,
    pub wall_ms: f64,
}

impl RunReport {
    pub fn patterns(&self) -> Vec<PatternId> {
        let mut p: Vec<PatternId> = self.violations.iter().filter_map(|v| v.pattern).collect();
        p.sort();
        p.dedup();
        p
    }

    pub fn summary_line(&self) -> String {
        let pats: Vec<&str> = self.patterns().iter().map(|p| p.label()).collect();
        format!(
            "{} {:<36} seed={} violations={} patterns=[{}] alarms={} {:.1}ms{}",
            if self.pass { "PASS" } else { "FAIL" },
            self.scenario,
            self.seed,
            self.violations.len(),
            pats.join(","),
            self.alarms,
            self.wall_ms,
            self.mismatch.as_deref().map(|m| format!(" ({m})")).unwrap_or_default(),
        )
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub filter: Option<String>,
    pub seed: u64,
    pub total: usize,
    pub passed: usize,
    pub failed: usize,
    pub wall_ms: f64,
    pub runs: Vec<RunReport>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.failed == 0
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        fs::write(path, json + "\n")
    }
}

pub fn describe(e: &Expectation) -> String {
    match e {
        Expectation::NoViolation => "no violation".into(),
        Expectation::Violation(p) => format!("violation {p}"),
        Expectation::Patterns(ps) => {
            let v: Vec<&str> = ps.iter().map(|p| p.label()).collect();
            format!("violations {}", v.join("+"))
        }
        Expectation::ViolationAbsentWithMitigation(flag) => format!("no violation with {flag}"),
    }
}
