#![cfg_attr(not(test), no_std)]
//! Deterministic simulator of ROBERT, DP3T and CWA/GAEN exposure notification,
//! with a capability-based adversary and a trace checker.

extern crate alloc;

pub mod adversary;
pub mod cryptokit;
pub mod cwa;
pub mod dp3t;
pub mod gaen;
pub mod robert;
pub mod worldmodel;
pub mod propcheck;
pub mod config;
pub mod scenarios;
