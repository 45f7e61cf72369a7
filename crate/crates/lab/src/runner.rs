use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ens_core::config::ConfigError;
use ens_core::scenarios::{self, Outcome, Scenario, ScenarioError};
use rayon::prelude::*;
use thiserror::Error;

use crate::export;
use crate::report::{describe, RunReport, SuiteReport, ViolationRecord};

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("bad filter: {0}")]
    Filter(#[from] glob::PatternError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: u64,
    /// `KEY=VALUE` overrides applied after the scenario's own.
    pub overrides: Vec<String>,
    pub trace_out: Option<PathBuf>,
}

pub fn list_scenarios() -> Vec<&'static str> {
    scenarios::all().iter().map(|s| s.id).collect()
}

pub fn run(id: &str, opts: &RunOptions) -> Result<RunReport, LabError> {
    let s = scenarios::find(id).ok_or_else(|| ScenarioError::UnknownScenario(id.to_string()))?;
    run_scenario(s, opts)
}

fn run_scenario(s: &Scenario, opts: &RunOptions) -> Result<RunReport, LabError> {
    let mut cfg = s.config();
    for o in &opts.overrides {
        cfg.apply(o)?;
    }
    let start = Instant::now();
    let outcome = s.run_with(opts.seed, cfg)?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    if let Some(p) = &opts.trace_out {
        export::save(&outcome.trace, p).map_err(|source| LabError::Io {
            path: p.clone(),
            source,
        })?;
    }
    Ok(report(s, &outcome, opts.trace_out.as_deref(), wall_ms))
}

fn report(s: &Scenario, o: &Outcome, trace_path: Option<&Path>, wall_ms: f64) -> RunReport {
    RunReport {
        scenario: s.id.to_string(),
        protocol: s.protocol.label(),
        seed: o.seed,
        trace_path: trace_path.map(|p| p.display().to_string()),
        trace_events: o.trace.len(),
        expectation: describe(&s.expectation),
        violations: o.violations.iter().map(ViolationRecord::from).collect(),
        alarms: o.alarmed.len(),
        pass: o.pass(),
        mismatch: o.mismatch.clone(),
        wall_ms,
    }
}

/// Runs every scenario whose id matches `filter` in parallel; traces go to `trace_dir/<id>.ndjson`.
pub fn run_all(filter: Option<&str>, seed: u64, trace_dir: Option<&Path>) -> Result<SuiteReport, LabError> {
    let pattern = filter.map(glob::Pattern::new).transpose()?;
    let selected: Vec<&Scenario> = scenarios::all()
        .iter()
        .filter(|s| pattern.as_ref().is_none_or(|p| p.matches(s.id)))
        .collect();
    let start = Instant::now();
    let runs = selected
        .par_iter()
        .map(|s| {
            let opts = RunOptions {
                seed,
                overrides: Vec::new(),
                trace_out: trace_dir.map(|d| d.join(format!("{}.ndjson", s.id))),
            };
            run_scenario(s, &opts)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let passed = runs.iter().filter(|r| r.pass).count();
    Ok(SuiteReport {
        filter: filter.map(str::to_string),
        seed,
        total: runs.len(),
        passed,
        failed: runs.len() - passed,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        runs,
    })
}
