//! Acceleration-to-force rendering laws, torque policy and washout.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::HeadState;
use crate::safety::SafetySupervisor;
use crate::stimulus::AccelerationSample;
use crate::Vec3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CueingError {
    #[error("invalid cueing config: {0}")]
    InvalidConfig(&'static str),
    #[error("unknown cueing mode `{0}` (expected none, direct or indirect)")]
    UnknownMode(String),
}

/// Haptic metaphor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueingMode {
    /// No force feedback.
    None,
    /// Force along the vehicle acceleration: the device pushes forward when speeding up.
    Direct,
    /// Force against the vehicle acceleration, mimicking inertial head displacement.
    #[default]
    Indirect,
}

impl CueingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CueingMode::None => "none",
            CueingMode::Direct => "direct",
            CueingMode::Indirect => "indirect",
        }
    }
}

impl fmt::Display for CueingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CueingMode {
    type Err = CueingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(CueingMode::None),
            "direct" => Ok(CueingMode::Direct),
            "indirect" => Ok(CueingMode::Indirect),
            other => Err(CueingError::UnknownMode(other.to_owned())),
        }
    }
}

/// Gated recentering spring. Only acts once the input has been quiet for
/// `activation_delay_s`, and never pushes harder than `recenter_force_cap_n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WashoutConfig {
    pub enabled: bool,
    pub recenter_stiffness_n_per_m: f64,
    /// Meant to sit below perceptual threshold. 0.5 N is a placeholder, not a validated value.
    pub recenter_force_cap_n: f64,
    pub activation_delay_s: f64,
    pub idle_accel_threshold: f64,
}

impl Default for WashoutConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            recenter_stiffness_n_per_m: 20.0,
            recenter_force_cap_n: 0.5,
            activation_delay_s: 1.0,
            idle_accel_threshold: 0.1,
        }
    }
}

impl WashoutConfig {
    pub fn validate(&self) -> Result<(), CueingError> {
        if !(self.recenter_force_cap_n.is_finite() && self.recenter_force_cap_n > 0.0) {
            return Err(CueingError::InvalidConfig("washout recenter_force_cap_n must be positive"));
        }
        if !(self.recenter_stiffness_n_per_m.is_finite() && self.recenter_stiffness_n_per_m >= 0.0) {
            return Err(CueingError::InvalidConfig("washout recenter_stiffness_n_per_m must be >= 0"));
        }
        if !(self.activation_delay_s.is_finite() && self.activation_delay_s >= 0.0) {
            return Err(CueingError::InvalidConfig("washout activation_delay_s must be >= 0"));
        }
        if !(self.idle_accel_threshold.is_finite() && self.idle_accel_threshold >= 0.0) {
            return Err(CueingError::InvalidConfig("washout idle_accel_threshold must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CueingConfig {
    pub mode: CueingMode,
    /// N per m/s². 2.0 is inferred from a 10 N cap at a 5 m/s² stimulus peak.
    pub gain: f64,
    pub torque_deadband_n: f64,
    pub washout: WashoutConfig,
}

impl Default for CueingConfig {
    fn default() -> Self {
        Self { mode: CueingMode::Indirect, gain: 2.0, torque_deadband_n: 1.0, washout: WashoutConfig::default() }
    }
}

impl CueingConfig {
    pub fn validate(&self) -> Result<(), CueingError> {
        if !(self.gain.is_finite() && self.gain >= 0.0) {
            return Err(CueingError::InvalidConfig("gain must be >= 0"));
        }
        if !(self.torque_deadband_n.is_finite() && self.torque_deadband_n > 0.0) {
            return Err(CueingError::InvalidConfig("torque_deadband_n must be positive"));
        }
        self.washout.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TorqueMode {
    /// No torque; the head rotates freely.
    Free,
    /// Orientation held about the two axes orthogonal to `axis`, free about `axis`.
    CylinderJoint { axis: Vec3 },
}

impl TorqueMode {
    pub fn label(&self) -> &'static str {
        match self {
            TorqueMode::Free => "free",
            TorqueMode::CylinderJoint { .. } => "cylinder",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WrenchCommand {
    pub force: Vec3,
    pub torque_mode: TorqueMode,
    pub timestamp: f64,
}

impl WrenchCommand {
    pub fn zero(timestamp: f64) -> Self {
        Self { force: Vec3::zeros(), torque_mode: TorqueMode::Free, timestamp }
    }
}

pub fn render_force(cfg: &CueingConfig, a: &AccelerationSample) -> Vec3 {
    match cfg.mode {
        CueingMode::None => Vec3::zeros(),
        CueingMode::Direct => a.accel * cfg.gain,
        CueingMode::Indirect => -(a.accel * cfg.gain),
    }
}

/// Torques engage only once |force| strictly exceeds the deadband.
pub fn torque_policy(force: &Vec3, deadband: f64) -> TorqueMode {
    let n = force.norm();
    if n > deadband {
        TorqueMode::CylinderJoint { axis: force / n }
    } else {
        TorqueMode::Free
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WashoutState {
    /// Time since the input last exceeded the idle threshold, s.
    pub idle_time: f64,
}

/// Additive recentering force for this tick. Head position is measured from
/// the workspace center.
pub fn washout_step(cfg: &WashoutConfig, state: &mut WashoutState, head: &HeadState, input_accel: &Vec3, dt: f64) -> Vec3 {
    if input_accel.norm() >= cfg.idle_accel_threshold {
        state.idle_time = 0.0;
        return Vec3::zeros();
    }
    state.idle_time += dt;
    if state.idle_time < cfg.activation_delay_s {
        return Vec3::zeros();
    }
    let spring = -head.position * cfg.recenter_stiffness_n_per_m;
    let n = spring.norm();
    if n > cfg.recenter_force_cap_n {
        spring * (cfg.recenter_force_cap_n / n)
    } else {
        spring
    }
}

/// Per-tick cueing state: configuration plus washout memory.
#[derive(Debug, Clone)]
pub struct CueingPipeline {
    cfg: CueingConfig,
    washout: WashoutState,
}

impl CueingPipeline {
    pub fn new(cfg: CueingConfig) -> Result<Self, CueingError> {
        cfg.validate()?;
        Ok(Self { cfg, washout: WashoutState::default() })
    }

    pub fn config(&self) -> &CueingConfig {
        &self.cfg
    }

    pub fn set_mode(&mut self, mode: CueingMode) {
        self.cfg.mode = mode;
    }

    pub fn set_gain(&mut self, gain: f64) {
        if gain.is_finite() && gain >= 0.0 {
            self.cfg.gain = gain;
        }
    }

    /// render -> washout -> clamp -> jerk limit -> kill gate -> torque policy.
    pub fn tick(
        &mut self,
        a: &AccelerationSample,
        head: &HeadState,
        safety: &mut SafetySupervisor,
        feed_live: bool,
        now: f64,
        dt: f64,
    ) -> WrenchCommand {
        let mut requested = render_force(&self.cfg, a);
        if self.cfg.washout.enabled {
            requested += washout_step(&self.cfg.washout, &mut self.washout, head, &a.accel, dt);
        }
        let force = safety.process(requested, feed_live, now, dt);
        WrenchCommand { force, torque_mode: torque_policy(&force, self.cfg.torque_deadband_n), timestamp: now }
    }
}

/// Stateless convenience wrapper around [`CueingPipeline::tick`] for a single tick.
pub fn cueing_tick(
    cfg: &CueingConfig,
    a: &AccelerationSample,
    head: &HeadState,
    safety: &mut SafetySupervisor,
    dt: f64,
) -> Result<WrenchCommand, CueingError> {
    let mut p = CueingPipeline::new(*cfg)?;
    Ok(p.tick(a, head, safety, true, a.timestamp, dt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::safety::{KillEvent, SafetyConfig};

    fn sample(x: f64, y: f64, z: f64) -> AccelerationSample {
        AccelerationSample::new(0.0, Vec3::new(x, y, z))
    }

    fn cfg(mode: CueingMode, gain: f64) -> CueingConfig {
        CueingConfig { mode, gain, ..Default::default() }
    }

    #[test]
    fn rendering_laws() {
        let a = sample(5.0, 0.0, 0.0);
        assert_eq!(render_force(&cfg(CueingMode::Indirect, 2.0), &a), Vec3::new(-10.0, 0.0, 0.0));
        assert_eq!(render_force(&cfg(CueingMode::Direct, 2.0), &a), Vec3::new(10.0, 0.0, 0.0));
        assert_eq!(render_force(&cfg(CueingMode::None, 2.0), &a), Vec3::zeros());
        for m in [CueingMode::None, CueingMode::Direct, CueingMode::Indirect] {
            assert_eq!(render_force(&cfg(m, 2.0), &sample(0.0, 0.0, 0.0)).norm(), 0.0);
        }
    }

    #[test]
    fn torque_examples() {
        assert_eq!(torque_policy(&Vec3::new(0.5, 0.0, 0.0), 1.0), TorqueMode::Free);
        match torque_policy(&Vec3::new(0.0, 3.0, 4.0), 1.0) {
            TorqueMode::CylinderJoint { axis } => assert!((axis - Vec3::new(0.0, 0.6, 0.8)).norm() < 1e-15),
            other => panic!("{other:?}"),
        }
        assert_eq!(torque_policy(&Vec3::new(1.0, 0.0, 0.0), 1.0), TorqueMode::Free);
    }

    #[test]
    fn washout_examples() {
        let wcfg = WashoutConfig { enabled: true, ..Default::default() };
        let mut centered = HeadState::default();
        let mut st = WashoutState { idle_time: 10.0 };
        assert_eq!(washout_step(&wcfg, &mut st, &centered, &Vec3::zeros(), 1e-3), Vec3::zeros());

        centered.position = Vec3::new(0.1, 0.0, 0.0);
        // spring: -20 * 0.1 = -2.0 N, capped at 0.5 N
        let f = washout_step(&wcfg, &mut st, &centered, &Vec3::zeros(), 1e-3);
        assert!((f - Vec3::new(-0.5, 0.0, 0.0)).norm() < 1e-15);

        let f = washout_step(&wcfg, &mut st, &centered, &Vec3::new(5.0, 0.0, 0.0), 1e-3);
        assert_eq!(f, Vec3::zeros());
        assert_eq!(st.idle_time, 0.0);
    }

    #[test]
    fn washout_waits_for_delay() {
        let wcfg = WashoutConfig { enabled: true, activation_delay_s: 0.5, ..Default::default() };
        let head = HeadState { position: Vec3::new(0.01, 0.0, 0.0), ..Default::default() };
        let mut st = WashoutState::default();
        let mut first_active = None;
        for i in 0..1000 {
            let f = washout_step(&wcfg, &mut st, &head, &Vec3::zeros(), 1e-3);
            if f.norm() > 0.0 && first_active.is_none() {
                first_active = Some(i);
            }
        }
        let i = first_active.unwrap();
        assert!((498..=500).contains(&i), "{i}");
    }

    fn engaged() -> SafetySupervisor {
        let mut s = SafetySupervisor::new(SafetyConfig::default()).unwrap();
        s.handle_event(KillEvent::Arm, 0.0);
        s.handle_event(KillEvent::Engage, 0.0);
        s
    }

    #[test]
    fn tick_none_mode_is_zero() {
        let mut s = engaged();
        let cmd = cueing_tick(&cfg(CueingMode::None, 2.0), &sample(5.0, 1.0, 0.0), &HeadState::default(), &mut s, 1e-3).unwrap();
        assert_eq!(cmd.force, Vec3::zeros());
        assert_eq!(cmd.torque_mode, TorqueMode::Free);
    }

    #[test]
    fn tick_indirect_settles_at_ten_newtons() {
        let mut s = engaged();
        let mut p = CueingPipeline::new(cfg(CueingMode::Indirect, 2.0)).unwrap();
        let head = HeadState::default();
        let mut cmd = WrenchCommand::zero(0.0);
        // jerk limit 200 N/s reaches 10 N after 50 ticks
        for i in 0..60 {
            cmd = p.tick(&sample(5.0, 0.0, 0.0), &head, &mut s, true, i as f64 * 1e-3, 1e-3);
        }
        assert!((cmd.force - Vec3::new(-10.0, 0.0, 0.0)).norm() < 1e-12);
        match cmd.torque_mode {
            TorqueMode::CylinderJoint { axis } => assert!((axis - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tick_killed_is_zero() {
        let mut s = engaged();
        s.handle_event(KillEvent::Kill, 0.0);
        let cmd = cueing_tick(&cfg(CueingMode::Indirect, 2.0), &sample(5.0, 0.0, 0.0), &HeadState::default(), &mut s, 1e-3).unwrap();
        assert_eq!(cmd.force, Vec3::zeros());
        assert_eq!(cmd.torque_mode, TorqueMode::Free);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("indirect".parse::<CueingMode>().unwrap(), CueingMode::Indirect);
        assert!("sideways".parse::<CueingMode>().is_err());
    }
}
