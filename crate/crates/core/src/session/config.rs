use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SessionError;
use crate::cueing::CueingConfig;
use crate::device::PlantConfig;
use crate::safety::SafetyConfig;
use crate::stimulus::StimulusPattern;
use crate::telemetry::TelemetryConfig;

pub const MIN_TICK_RATE_HZ: f64 = 250.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SourceKind {
    #[serde(rename = "udp")]
    LiveUdp,
    #[serde(rename = "trace")]
    TraceReplay,
    #[default]
    #[serde(rename = "stimulus")]
    SyntheticStimulus,
}

impl FromStr for SourceKind {
    type Err = SessionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "udp" => Ok(SourceKind::LiveUdp),
            "trace" => Ok(SourceKind::TraceReplay),
            "stimulus" => Ok(SourceKind::SyntheticStimulus),
            other => Err(SessionError::Config(format!("unknown source `{other}` (expected udp, trace or stimulus)"))),
        }
    }
}

/// Everything a session needs. Loaded from TOML; every table is optional.
///
/// ```toml
/// tick_rate_hz = 1000
/// source = "stimulus"
///
/// [cueing]
/// mode = "indirect"
/// gain = 2.0
///
/// [safety]
/// force_limit_n = 10.0
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub tick_rate_hz: f64,
    pub source: SourceKind,
    /// Required when `source = "trace"`.
    pub trace_path: Option<PathBuf>,
    pub stimulus: StimulusPattern,
    pub cueing: CueingConfig,
    pub safety: SafetyConfig,
    pub plant: PlantConfig,
    pub telemetry: TelemetryConfig,
    pub log_path: Option<PathBuf>,
    /// Mean tick compute budget, µs.
    pub tick_budget_us: f64,
    /// State snapshot rate for the console, Hz.
    pub snapshot_rate_hz: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            tick_rate_hz: 1000.0,
            source: SourceKind::SyntheticStimulus,
            trace_path: None,
            stimulus: StimulusPattern::default(),
            cueing: CueingConfig::default(),
            safety: SafetyConfig::default(),
            plant: PlantConfig::default(),
            telemetry: TelemetryConfig::default(),
            log_path: None,
            tick_budget_us: 100.0,
            snapshot_rate_hz: 30.0,
        }
    }
}

impl SessionConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, SessionError> {
        let cfg: Self = toml::from_str(text).map_err(|e| SessionError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SessionError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| SessionError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn tick_dt(&self) -> f64 {
        1.0 / self.tick_rate_hz
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        let err = |m: String| Err(SessionError::Config(m));
        if !(self.tick_rate_hz.is_finite() && self.tick_rate_hz >= MIN_TICK_RATE_HZ) {
            return err(format!("tick_rate_hz must be >= {MIN_TICK_RATE_HZ}"));
        }
        if !(self.snapshot_rate_hz > 0.0 && self.snapshot_rate_hz <= self.tick_rate_hz) {
            return err("snapshot_rate_hz must be in (0, tick_rate_hz]".into());
        }
        if !(self.tick_budget_us.is_finite() && self.tick_budget_us > 0.0) {
            return err("tick_budget_us must be positive".into());
        }
        self.stimulus.validate().map_err(|e| SessionError::Config(e.to_string()))?;
        self.cueing.validate().map_err(|e| SessionError::Config(e.to_string()))?;
        self.safety.validate().map_err(|e| SessionError::Config(e.to_string()))?;
        self.plant.validate().map_err(|e| SessionError::Config(e.to_string()))?;
        self.telemetry.channel_map().map_err(|e| SessionError::Config(format!("telemetry: {e}")))?;
        if !(self.telemetry.staleness_timeout_s.is_finite() && self.telemetry.staleness_timeout_s > 0.0) {
            return err("telemetry.staleness_timeout_s must be positive".into());
        }
        if self.cueing.washout.recenter_force_cap_n >= self.safety.force_limit_n {
            return err("cueing.washout.recenter_force_cap_n must be below safety.force_limit_n".into());
        }
        if self.source == SourceKind::TraceReplay && self.trace_path.is_none() {
            return err("source = \"trace\" needs trace_path".into());
        }
        Ok(())
    }

    /// Highest gain that keeps the stimulus peak within the force limit.
    pub fn max_gain(&self) -> f64 {
        crate::safety::max_feasible_gain(self.safety.force_limit_n, self.stimulus.step_amplitude)
    }
}
