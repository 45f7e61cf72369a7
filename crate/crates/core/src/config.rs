//! Scenario configuration with `key=value` overrides.

use alloc::string::{String, ToString};
use core::str::FromStr;

use thiserror::Error;

use crate::cwa::{CwaConfig, EfgsConfig};
use crate::dp3t::Dp3tConfig;
use crate::robert::RobertConfig;
use crate::worldmodel::TimeConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SimConfig {
    pub time: TimeConfig,
    pub robert: RobertConfig,
    pub dp3t: Dp3tConfig,
    pub cwa: CwaConfig,
    pub efgs: EfgsConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`")]
    BadValue { key: String, value: String },
    #[error("expected KEY=VALUE, got `{0}`")]
    Syntax(String),
}

pub const KEYS: &[&str] = &[
    "time.epoch_length_s",
    "time.epochs_per_day",
    "robert.hello_tolerance_s",
    "robert.batch_limit",
    "robert.bind_window_to_token",
    "robert.filter_self_uploads",
    "robert.long_validity_days",
    "robert.short_validity_min",
    "robert.sheet_days",
    "dp3t.ac_freshness_days",
    "dp3t.release_at_day_end",
    "dp3t.max_committed_keys",
    "cwa.one_tan_per_token",
    "cwa.skew_tolerance_epochs",
    "efgs.expiry_agreement",
    "efgs.release_delay_hours",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

impl SimConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "time.epoch_length_s" => self.time.epoch_length_s = parse(key, v)?,
            "time.epochs_per_day" => self.time.epochs_per_day = parse(key, v)?,
            "robert.hello_tolerance_s" => self.robert.hello_tolerance_s = parse(key, v)?,
            "robert.batch_limit" => {
                self.robert.batch_limit = match v {
                    "none" | "" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "robert.bind_window_to_token" => self.robert.bind_window_to_token = parse(key, v)?,
            "robert.filter_self_uploads" => self.robert.filter_self_uploads = parse(key, v)?,
            "robert.long_validity_days" => self.robert.long_validity_days = parse(key, v)?,
            "robert.short_validity_min" => self.robert.short_validity_min = parse(key, v)?,
            "robert.sheet_days" => self.robert.sheet_days = parse(key, v)?,
            "dp3t.ac_freshness_days" => self.dp3t.ac_freshness_days = parse(key, v)?,
            "dp3t.release_at_day_end" => self.dp3t.release_at_day_end = parse(key, v)?,
            "dp3t.max_committed_keys" => self.dp3t.max_committed_keys = parse(key, v)?,
            "cwa.one_tan_per_token" => self.cwa.one_tan_per_token = parse(key, v)?,
            "cwa.skew_tolerance_epochs" => self.cwa.skew_tolerance_epochs = parse(key, v)?,
            "efgs.expiry_agreement" => self.efgs.expiry_agreement = parse(key, v)?,
            "efgs.release_delay_hours" => self.efgs.release_delay_hours = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies one `KEY=VALUE` override.
    pub fn apply(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax(assignment.to_string()))?;
        self.set(k.trim(), v)
    }

    pub fn with(mut self, key: &str, value: &str) -> Self {
        self.set(key, value).expect("valid override");
        self
    }
}
