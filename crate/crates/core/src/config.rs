//! Flat `key=value` run configuration.
//!
//! One pair per line, `#` starts a comment, blank lines are ignored. Missing
//! keys keep their defaults; unknown or repeated keys are rejected.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::device::UNLIMITED;
use crate::epidemic::SimulationParams;
use crate::world::WorldConfig;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Epidemic,
    Sweep,
    World,
    CryptoSelftest,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Command::Epidemic => "epidemic",
            Command::Sweep => "sweep",
            Command::World => "world",
            Command::CryptoSelftest => "crypto-selftest",
        })
    }
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "epidemic" => Ok(Command::Epidemic),
            "sweep" => Ok(Command::Sweep),
            "world" => Ok(Command::World),
            "crypto-selftest" => Ok(Command::CryptoSelftest),
            other => Err(format!("unknown command {other:?}")),
        }
    }
}

/// Epidemic parameters that a sweep may vary.
pub const SWEEP_KEYS: [&str; 6] = ["efficiency", "quarantine_factor", "ramp_days", "activation_day", "r0", "incubation_days"];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<f64>,
}

impl SweepAxis {
    /// Parses `key=v1,v2,...`.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let invalid = |m: String| ConfigError::Validation(m);
        let (key, values) = text.split_once('=').ok_or_else(|| invalid(format!("sweep {text:?} is not key=v1,v2,...")))?;
        let key = key.trim();
        if !SWEEP_KEYS.contains(&key) {
            return Err(invalid(format!("cannot sweep {key:?}; choose one of {}", SWEEP_KEYS.join(", "))));
        }
        let values = values
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| invalid(format!("bad sweep value {v:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if values.is_empty() {
            return Err(invalid("sweep needs at least one value".into()));
        }
        Ok(Self { key: key.to_string(), values })
    }

    /// `params` with the swept key set to `value`.
    pub fn apply(&self, params: &SimulationParams, value: f64) -> Result<SimulationParams, ConfigError> {
        let mut p = params.clone();
        let whole = |v: f64| {
            if v >= 0.0 && v.fract() == 0.0 && v <= f64::from(u32::MAX) {
                Ok(v as u32)
            } else {
                Err(ConfigError::Validation(format!("{} must be a non-negative integer, got {v}", self.key)))
            }
        };
        match self.key.as_str() {
            "efficiency" => p.efficiency = value,
            "quarantine_factor" => p.quarantine_factor = value,
            "r0" => p.r0 = value,
            "ramp_days" => p.ramp_days = whole(value)?,
            "activation_day" => p.activation_day = whole(value)?,
            "incubation_days" => p.incubation_days = whole(value)?,
            other => return Err(ConfigError::Validation(format!("cannot sweep {other:?}"))),
        }
        p.validate().map_err(|e| ConfigError::Validation(e.to_string()))?;
        Ok(p)
    }

    pub fn label(&self, value: f64) -> String {
        format!("{}={}", self.key, value)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub params: SimulationParams,
    pub world: WorldConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub sweep_axis: Option<SweepAxis>,
    pub trace: Option<PathBuf>,
    pub shade_protected: bool,
}

impl RunConfig {
    pub fn defaults(command: Command) -> Self {
        Self {
            command,
            params: SimulationParams::default(),
            world: WorldConfig::default(),
            output_dir: PathBuf::from("out"),
            seed: 42,
            sweep_axis: None,
            trace: None,
            shade_protected: false,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| ConfigError::Validation(e);
        self.params.validate().map_err(|e| invalid(e.to_string()))?;
        self.world.validate().map_err(|e| invalid(e.to_string()))?;
        match (&self.sweep_axis, self.command) {
            (Some(axis), Command::Sweep) => {
                for &v in &axis.values {
                    axis.apply(&self.params, v)?;
                }
            }
            (None, Command::Sweep) => return Err(invalid("sweep requires an axis (key=v1,v2,...)".into())),
            (Some(_), _) => return Err(invalid(format!("a sweep axis is only valid with the sweep command, not {}", self.command))),
            (None, _) => {}
        }
        Ok(())
    }
}

fn value<T: FromStr>(raw: &str, line: usize, key: &str) -> Result<T, ConfigError> {
    raw.parse().map_err(|_| ConfigError::Parse { line, message: format!("cannot parse {key} value {raw:?}") })
}

fn capacity(raw: &str, line: usize) -> Result<usize, ConfigError> {
    match raw {
        "unlimited" | "inf" => Ok(UNLIMITED),
        other => value(other, line, "capacity"),
    }
}

/// Parses a configuration file for `command` and validates the result.
pub fn parse_config(text: &str, command: Command) -> Result<RunConfig, ConfigError> {
    let cfg = read_config(text, command)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Like [`parse_config`] but leaves validation to the caller, so that
/// command-line overrides can be applied first.
pub fn read_config(text: &str, command: Command) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::defaults(command);
    let mut seen = BTreeSet::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, raw) =
            content.split_once('=').ok_or_else(|| ConfigError::Parse { line, message: format!("expected key=value, got {content:?}") })?;
        let (key, raw) = (key.trim(), raw.trim());
        if !seen.insert(key.to_string()) {
            return Err(ConfigError::Parse { line, message: format!("duplicate key {key:?}") });
        }
        let p = &mut cfg.params;
        let w = &mut cfg.world;
        match key {
            "r0" => p.r0 = value(raw, line, key)?,
            "incubation_days" => p.incubation_days = value(raw, line, key)?,
            "quarantine_factor" => p.quarantine_factor = value(raw, line, key)?,
            "activation_day" => p.activation_day = value(raw, line, key)?,
            "ramp_days" => p.ramp_days = value(raw, line, key)?,
            "efficiency" => p.efficiency = value(raw, line, key)?,
            "initial_infected" => p.initial_infected = value(raw, line, key)?,
            "horizon_days" => p.horizon_days = value(raw, line, key)?,
            "replicates" => p.replicates = value(raw, line, key)?,
            "max_active" => p.max_active = value(raw, line, key)?,
            "alert_policy" => {
                p.alert_policy = raw.parse().map_err(|m: String| ConfigError::Parse { line, message: m })?;
            }
            "seed" => cfg.seed = value(raw, line, key)?,
            "output_dir" => cfg.output_dir = PathBuf::from(raw),
            "sweep" => cfg.sweep_axis = Some(SweepAxis::parse(raw)?),
            "shade_protected" => cfg.shade_protected = value(raw, line, key)?,
            "trace" => cfg.trace = Some(PathBuf::from(raw)),
            "box_size" => w.box_size = value(raw, line, key)?,
            "agent_count" => w.agent_count = value(raw, line, key)?,
            "infection_range" => w.infection_range = value(raw, line, key)?,
            "infection_prob_per_contact_second" => w.infection_prob_per_contact_second = value(raw, line, key)?,
            "tracking_threshold" => w.tracking_threshold = value(raw, line, key)?,
            "tick_seconds" => w.tick_seconds = value(raw, line, key)?,
            "app_user_fraction" => w.app_user_fraction = value(raw, line, key)?,
            "rssi_at_1m" => w.radio.rssi_at_1m = value(raw, line, key)?,
            "path_loss_exponent" => w.radio.path_loss_exponent = value(raw, line, key)?,
            "noise_sigma" => w.radio.noise_sigma = value(raw, line, key)?,
            "max_radio_range" => w.radio.max_radio_range = value(raw, line, key)?,
            "incubation_seconds" => w.incubation_seconds = value(raw, line, key)?,
            "duration_seconds" => w.duration_seconds = value(raw, line, key)?,
            "world_initial_infected" => w.initial_infected = value(raw, line, key)?,
            "min_speed" => w.min_speed = value(raw, line, key)?,
            "max_speed" => w.max_speed = value(raw, line, key)?,
            "max_pause_seconds" => w.max_pause_seconds = value(raw, line, key)?,
            "capacity" => w.capacity = capacity(raw, line)?,
            "yellow_enabled" => w.yellow_enabled = value(raw, line, key)?,
            "key_bits" => w.key_bits = value(raw, line, key)?,
            "purge_interval_seconds" => w.purge_interval_seconds = value(raw, line, key)?,
            "release_interval_seconds" => w.release_interval_seconds = value(raw, line, key)?,
            "release_batch" => w.release_batch = value(raw, line, key)?,
            other => return Err(ConfigError::Parse { line, message: format!("unknown key {other:?}") }),
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config("", Command::Epidemic).unwrap();
        let p = &cfg.params;
        assert_eq!((p.r0, p.incubation_days, p.quarantine_factor), (3.0, 14, 10.0));
        assert_eq!((p.activation_day, p.ramp_days, p.replicates), (30, 10, 50));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(parse_config("efficiency=1.5", Command::Epidemic), Err(ConfigError::Validation(_))));
        assert!(matches!(parse_config("unknown_key=1", Command::Epidemic), Err(ConfigError::Parse { line: 1, .. })));
        assert!(matches!(parse_config("# c\nr0=3\nr0=4", Command::Epidemic), Err(ConfigError::Parse { line: 3, .. })));
        assert!(matches!(parse_config("r0 3", Command::Epidemic), Err(ConfigError::Parse { .. })));
        assert!(matches!(parse_config("sweep=efficiency=0.5", Command::Epidemic), Err(ConfigError::Validation(_))));
        assert!(matches!(parse_config("", Command::Sweep), Err(ConfigError::Validation(_))));
        assert!(matches!(parse_config("sweep=k=1,2", Command::Sweep), Err(ConfigError::Validation(_))));
        assert!(matches!(parse_config("sweep=ramp_days=2.5", Command::Sweep), Err(ConfigError::Validation(_))));
    }

    #[test]
    fn reads_world_and_sweep_keys() {
        let text = "sweep = efficiency=0.2,0.4 # axis\ncapacity=unlimited\nnoise_sigma=0\nalert_policy=at_detection\n";
        let cfg = parse_config(text, Command::Sweep).unwrap();
        assert_eq!(cfg.sweep_axis.unwrap().values, vec![0.2, 0.4]);
        assert_eq!(cfg.world.capacity, UNLIMITED);
        assert_eq!(cfg.world.radio.noise_sigma, 0.0);
        assert_eq!(cfg.params.alert_policy, crate::epidemic::AlertPolicy::AtDetection);
    }
}
