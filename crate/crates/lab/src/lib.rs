//! Scenario runner, trace export and report files for `ens-core`.

pub mod export;
pub mod golden;
pub mod report;
pub mod runner;

pub use report::{RunReport, SuiteReport, ViolationRecord};
pub use runner::{list_scenarios, run, run_all, LabError, RunOptions};
