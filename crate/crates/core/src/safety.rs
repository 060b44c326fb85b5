//! Safety chain applied to every force command before it reaches the device.
//!
//! Order per tick: kill latch poll, radial force clamp, jerk (slew) limit,
//! kill-switch gate with staleness fade. A kill always wins: output drops to
//! exactly zero on the tick the kill is observed, bypassing the slew limit.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{is_finite_vec, Vec3};

/// Order-of-magnitude force a neck tolerates. Limits are kept well below it.
pub const PHYSIOLOGICAL_REFERENCE_N: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SafetyError {
    #[error("invalid safety config: {0}")]
    InvalidConfig(String),
    #[error("non-finite force command")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SafetyConfig {
    /// Maximum commanded force magnitude, N.
    pub force_limit_n: f64,
    /// Maximum change of force per second, N/s.
    pub jerk_limit_n_per_s: f64,
    /// Ramp-down time on telemetry loss or disengage, s.
    pub fade_s: f64,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self { force_limit_n: 10.0, jerk_limit_n_per_s: 200.0, fade_s: 0.25 }
    }
}

impl SafetyConfig {
    pub fn validate(&self) -> Result<(), SafetyError> {
        let bad = |m: &str| Err(SafetyError::InvalidConfig(m.to_owned()));
        if !(self.force_limit_n > 0.0 && self.force_limit_n <= PHYSIOLOGICAL_REFERENCE_N / 2.0) {
            return bad("force_limit_n must be in (0, 50] N");
        }
        if !(self.jerk_limit_n_per_s.is_finite() && self.jerk_limit_n_per_s > 0.0) {
            return bad("jerk_limit_n_per_s must be positive");
        }
        if !(self.fade_s.is_finite() && self.fade_s > 0.0) {
            return bad("fade_s must be positive");
        }
        // a full-scale fade must itself respect the slew limit
        if self.force_limit_n / self.fade_s > self.jerk_limit_n_per_s {
            return bad("fade_s too short: fading from force_limit_n would exceed jerk_limit_n_per_s");
        }
        Ok(())
    }

    /// Largest slew per tick.
    pub fn max_step(&self, dt: f64) -> f64 {
        self.jerk_limit_n_per_s * dt
    }
}

/// Scales `f` radially so its magnitude is at most `limit`. Direction is kept.
pub fn clamp_force(f: Vec3, limit: f64) -> Result<Vec3, SafetyError> {
    if !is_finite_vec(&f) {
        return Err(SafetyError::NonFinite);
    }
    let n = f.norm();
    if n <= limit {
        return Ok(f);
    }
    let mut out = f * (limit / n);
    // rounding can leave the result an ulp above the limit
    while out.norm() > limit {
        out *= 1.0 - f64::EPSILON;
    }
    Ok(out)
}

/// Moves from `prev` toward `requested` by at most `jerk_limit * dt`.
pub fn limit_jerk(prev: Vec3, requested: Vec3, jerk_limit: f64, dt: f64) -> Vec3 {
    let delta = requested - prev;
    let max_step = jerk_limit * dt;
    let n = delta.norm();
    if n <= max_step {
        requested
    } else {
        prev + delta * (max_step / n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum KillState {
    Disarmed,
    Armed,
    Engaged,
    Killed,
}

impl KillState {
    pub fn as_str(self) -> &'static str {
        match self {
            KillState::Disarmed => "DISARMED",
            KillState::Armed => "ARMED",
            KillState::Engaged => "ENGAGED",
            KillState::Killed => "KILLED",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KillEvent {
    Arm,
    Engage,
    Release,
    Kill,
    Rearm,
}

impl KillEvent {
    pub const ALL: [KillEvent; 5] = [KillEvent::Arm, KillEvent::Engage, KillEvent::Release, KillEvent::Kill, KillEvent::Rearm];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KillSwitch {
    pub state: KillState,
    pub last_transition: f64,
}

impl Default for KillSwitch {
    fn default() -> Self {
        Self { state: KillState::Disarmed, last_transition: 0.0 }
    }
}

impl KillSwitch {
    pub fn permits_force(&self) -> bool {
        self.state == KillState::Engaged
    }
}

pub fn kill_transition(ks: KillSwitch, event: KillEvent, now: f64) -> KillSwitch {
    use KillEvent::*;
    use KillState::*;
    let next = match (ks.state, event) {
        (Killed, Kill) => return ks,
        (_, Kill) => Killed,
        (Disarmed, Arm) => Armed,
        (Armed, Engage) => Engaged,
        (Engaged, Release) => Armed,
        (Killed, Rearm) => Disarmed,
        (state, ev) => {
            log::debug!("ignoring {ev:?} in state {state:?}");
            return ks;
        }
    };
    KillSwitch { state: next, last_transition: now }
}

/// Progress of a linear ramp-down to zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FadeState {
    from: Option<Vec3>,
    elapsed: f64,
}

impl FadeState {
    pub fn is_active(&self) -> bool {
        self.from.is_some()
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

/// Final gate. Passes `f` only while engaged with a live feed. A kill yields
/// exactly zero at once. Any other condition fades linearly from
/// `last_output` to zero over `fade_duration`; a fade already in progress
/// continues rather than restarting.
pub fn gate_output(
    ks: &KillSwitch,
    f: Vec3,
    fade: &mut FadeState,
    feed_live: bool,
    last_output: Vec3,
    fade_duration: f64,
    dt: f64,
) -> Vec3 {
    match ks.state {
        KillState::Killed => {
            fade.reset();
            Vec3::zeros()
        }
        KillState::Engaged if feed_live => {
            fade.reset();
            f
        }
        _ => {
            let from = *fade.from.get_or_insert(last_output);
            fade.elapsed += dt;
            let remaining = 1.0 - fade.elapsed / fade_duration;
            if remaining <= 0.0 {
                Vec3::zeros()
            } else {
                from * remaining
            }
        }
    }
}

/// Latched kill request shared across threads. Setting it is never lost:
/// the flag stays up until the control loop consumes it.
#[derive(Debug, Clone, Default)]
pub struct KillLatch(Arc<AtomicBool>);

impl KillLatch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn trigger(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_set(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }

    pub(crate) fn take(&self) -> bool {
        self.0.swap(false, Ordering::SeqCst)
    }
}

/// All safety state owned by the control loop.
#[derive(Debug, Clone)]
pub struct SafetySupervisor {
    cfg: SafetyConfig,
    switch: KillSwitch,
    latch: KillLatch,
    fade: FadeState,
    last_output: Vec3,
    faulted: bool,
}

impl SafetySupervisor {
    pub fn new(cfg: SafetyConfig) -> Result<Self, SafetyError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            switch: KillSwitch::default(),
            latch: KillLatch::new(),
            fade: FadeState::default(),
            last_output: Vec3::zeros(),
            faulted: false,
        })
    }

    pub fn config(&self) -> &SafetyConfig {
        &self.cfg
    }

    pub fn switch(&self) -> KillSwitch {
        self.switch
    }

    pub fn state(&self) -> KillState {
        self.switch.state
    }

    /// Handle for other threads to request a kill.
    pub fn latch(&self) -> KillLatch {
        self.latch.clone()
    }

    pub fn last_output(&self) -> Vec3 {
        self.last_output
    }

    pub fn is_faulted(&self) -> bool {
        self.faulted
    }

    pub fn handle_event(&mut self, event: KillEvent, now: f64) {
        self.switch = kill_transition(self.switch, event, now);
        if self.switch.state == KillState::Killed {
            // a rearm before the next tick must not resurrect the pre-kill force
            self.fade.reset();
            self.last_output = Vec3::zeros();
        }
        if event == KillEvent::Rearm && self.switch.state == KillState::Disarmed {
            self.faulted = false;
        }
    }

    /// Hard fault: force output to zero and latch KILLED.
    pub fn fault(&mut self, now: f64) {
        log::error!("safety hard fault at t={now:.4}");
        self.faulted = true;
        self.handle_event(KillEvent::Kill, now);
        self.fade.reset();
        self.last_output = Vec3::zeros();
    }

    /// Runs one tick of the chain on `requested` and returns the force to send.
    pub fn process(&mut self, requested: Vec3, feed_live: bool, now: f64, dt: f64) -> Vec3 {
        if self.latch.take() {
            self.handle_event(KillEvent::Kill, now);
        }
        let clamped = match clamp_force(requested, self.cfg.force_limit_n) {
            Ok(f) => f,
            Err(_) => {
                self.fault(now);
                return Vec3::zeros();
            }
        };
        let slewed = limit_jerk(self.last_output, clamped, self.cfg.jerk_limit_n_per_s, dt);
        // the slewed point lies inside the ball up to rounding; re-clamp to keep the cap exact
        let slewed = clamp_force(slewed, self.cfg.force_limit_n).unwrap_or_else(|_| Vec3::zeros());
        let out = gate_output(&self.switch, slewed, &mut self.fade, feed_live, self.last_output, self.cfg.fade_s, dt);
        self.last_output = out;
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalibrationResponse {
    Accept,
    TooStrong,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("responder timed out")]
pub struct ResponderTimeout;

/// Person (or script) judging each probe of the gain staircase.
pub trait CalibrationResponder {
    /// `step` counts from 1. `peak_force` is the force the probe produces.
    fn respond(&mut self, step: usize, gain: f64, peak_force: f64) -> Result<CalibrationResponse, ResponderTimeout>;
}

/// Accepts every probe until `reject_at`, times out at `timeout_at`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedCalibration {
    pub reject_at: Option<usize>,
    pub timeout_at: Option<usize>,
}

impl CalibrationResponder for ScriptedCalibration {
    fn respond(&mut self, step: usize, _gain: f64, _peak: f64) -> Result<CalibrationResponse, ResponderTimeout> {
        if self.timeout_at == Some(step) {
            return Err(ResponderTimeout);
        }
        Ok(if self.reject_at == Some(step) { CalibrationResponse::TooStrong } else { CalibrationResponse::Accept })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStep {
    pub gain: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub user_id: String,
    pub accepted_gain: f64,
    pub steps: Vec<CalibrationStep>,
    pub aborted: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibrationError {
    #[error("probe acceleration must be positive and finite")]
    BadProbe,
    #[error(transparent)]
    Config(#[from] SafetyError),
}

pub const CALIBRATION_STEPS: usize = 5;
pub const CALIBRATION_FLOOR: f64 = 0.25;

/// Highest gain whose peak force at `probe_accel` stays within the limit.
pub fn max_feasible_gain(force_limit: f64, probe_accel: f64) -> f64 {
    let mut g = force_limit / probe_accel;
    while g * probe_accel > force_limit {
        g = f64::from_bits(g.to_bits() - 1);
    }
    g
}

/// The staircase gains: evenly spaced from 25% to 100% of the feasible maximum.
pub fn staircase(force_limit: f64, probe_accel: f64) -> [f64; CALIBRATION_STEPS] {
    let top = max_feasible_gain(force_limit, probe_accel);
    let span = 1.0 - CALIBRATION_FLOOR;
    std::array::from_fn(|i| {
        let frac = CALIBRATION_FLOOR + span * i as f64 / (CALIBRATION_STEPS - 1) as f64;
        if i == CALIBRATION_STEPS - 1 {
            top
        } else {
            top * frac
        }
    })
}

/// Ascending gain staircase. Stops at the first "too strong" and keeps the
/// last accepted gain, or the lowest step if nothing was accepted. A responder
/// timeout aborts to the lowest step.
pub fn calibrate_gain(
    user_id: &str,
    responder: &mut dyn CalibrationResponder,
    cfg: &SafetyConfig,
    probe_accel: f64,
) -> Result<CalibrationResult, CalibrationError> {
    cfg.validate()?;
    if !(probe_accel.is_finite() && probe_accel > 0.0) {
        return Err(CalibrationError::BadProbe);
    }
    let gains = staircase(cfg.force_limit_n, probe_accel);
    let mut steps = Vec::with_capacity(CALIBRATION_STEPS);
    let mut accepted_gain = gains[0];
    let mut aborted = false;
    for (i, &gain) in gains.iter().enumerate() {
        match responder.respond(i + 1, gain, gain * probe_accel) {
            Ok(CalibrationResponse::Accept) => {
                steps.push(CalibrationStep { gain, accepted: true });
                accepted_gain = gain;
            }
            Ok(CalibrationResponse::TooStrong) => {
                steps.push(CalibrationStep { gain, accepted: false });
                break;
            }
            Err(ResponderTimeout) => {
                log::warn!("calibration for {user_id} aborted: responder timeout at step {}", i + 1);
                steps.push(CalibrationStep { gain, accepted: false });
                accepted_gain = gains[0];
                aborted = true;
                break;
            }
        }
    }
    Ok(CalibrationResult { user_id: user_id.to_owned(), accepted_gain, steps, aborted })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(clamp_force(v(12.0, 0.0, 0.0), 10.0).unwrap(), v(10.0, 0.0, 0.0));
        assert_eq!(clamp_force(v(6.0, 8.0, 0.0), 10.0).unwrap(), v(6.0, 8.0, 0.0));
        // |f| = 15 -> scale 2/3
        let c = clamp_force(v(9.0, 12.0, 0.0), 10.0).unwrap();
        assert!((c - v(6.0, 8.0, 0.0)).norm() < 1e-12);
        assert!(c.norm() <= 10.0);
        assert_eq!(clamp_force(v(f64::NAN, 0.0, 0.0), 10.0), Err(SafetyError::NonFinite));
        assert_eq!(clamp_force(v(f64::INFINITY, 0.0, 0.0), 10.0), Err(SafetyError::NonFinite));
    }

    #[test]
    fn jerk_examples() {
        let out = limit_jerk(Vec3::zeros(), v(10.0, 0.0, 0.0), 50.0, 0.001);
        assert!((out - v(0.05, 0.0, 0.0)).norm() < 1e-15);
        let req = v(0.01, -0.02, 0.0);
        assert_eq!(limit_jerk(Vec3::zeros(), req, 50.0, 0.001), req);
        let p = v(3.0, 4.0, 5.0);
        assert_eq!(limit_jerk(p, p, 50.0, 0.001), p);
    }

    #[test]
    fn rearm_before_tick_does_not_resurrect_force() {
        let mut s = SafetySupervisor::new(SafetyConfig::default()).unwrap();
        s.handle_event(KillEvent::Arm, 0.0);
        s.handle_event(KillEvent::Engage, 0.0);
        let mut t = 0.0;
        for _ in 0..100 {
            s.process(v(8.0, 0.0, 0.0), true, t, 0.001);
            t += 0.001;
        }
        s.handle_event(KillEvent::Kill, t);
        s.handle_event(KillEvent::Rearm, t);
        assert_eq!(s.state(), KillState::Disarmed);
        assert_eq!(s.process(v(8.0, 0.0, 0.0), true, t, 0.001), Vec3::zeros());
    }

    #[test]
    fn kill_switch_table() {
        use KillEvent::*;
        use KillState::*;
        let at = |s| KillSwitch { state: s, last_transition: 0.0 };
        assert_eq!(kill_transition(at(Engaged), Kill, 1.0).state, Killed);
        assert_eq!(kill_transition(at(Killed), Engage, 1.0).state, Killed);
        assert_eq!(kill_transition(at(Killed), Rearm, 1.0).state, Disarmed);
        assert_eq!(kill_transition(at(Disarmed), Arm, 1.0).state, Armed);
        assert_eq!(kill_transition(at(Armed), Engage, 1.0).state, Engaged);
        assert_eq!(kill_transition(at(Engaged), Release, 1.0).state, Armed);
        assert_eq!(kill_transition(at(Disarmed), Engage, 1.0).state, Disarmed);
        assert_eq!(kill_transition(at(Armed), Rearm, 1.0).state, Armed);
        let t = kill_transition(at(Armed), Engage, 2.5);
        assert_eq!(t.last_transition, 2.5);
        assert_eq!(kill_transition(t, Arm, 3.0).last_transition, 2.5);
    }

    #[test]
    fn gate_killed_is_zero_immediately() {
        let ks = KillSwitch { state: KillState::Killed, last_transition: 0.0 };
        let mut fade = FadeState::default();
        let out = gate_output(&ks, v(8.0, 0.0, 0.0), &mut fade, true, v(8.0, 0.0, 0.0), 0.25, 0.001);
        assert_eq!(out, Vec3::zeros());
    }

    #[test]
    fn gate_engaged_live_passes() {
        let ks = KillSwitch { state: KillState::Engaged, last_transition: 0.0 };
        let mut fade = FadeState::default();
        assert_eq!(gate_output(&ks, v(1.0, 2.0, 3.0), &mut fade, true, Vec3::zeros(), 0.25, 0.001), v(1.0, 2.0, 3.0));
    }

    #[test]
    fn gate_stale_fades_linearly() {
        let ks = KillSwitch { state: KillState::Engaged, last_transition: 0.0 };
        let mut fade = FadeState::default();
        let mut last = v(8.0, 0.0, 0.0);
        for _ in 0..125 {
            last = gate_output(&ks, v(8.0, 0.0, 0.0), &mut fade, false, last, 0.25, 0.001);
        }
        assert!((last - v(4.0, 0.0, 0.0)).norm() < 1e-9, "{last:?}");
    }

    #[test]
    fn supervisor_latch_kills_same_tick() {
        let mut s = SafetySupervisor::new(SafetyConfig::default()).unwrap();
        s.handle_event(KillEvent::Arm, 0.0);
        s.handle_event(KillEvent::Engage, 0.0);
        for i in 0..100 {
            s.process(v(10.0, 0.0, 0.0), true, i as f64 * 1e-3, 1e-3);
        }
        assert!(s.last_output().norm() > 1.0);
        s.latch().trigger();
        assert_eq!(s.process(v(10.0, 0.0, 0.0), true, 0.1, 1e-3), Vec3::zeros());
        assert_eq!(s.state(), KillState::Killed);
        assert!(!s.latch().is_set());
    }

    #[test]
    fn supervisor_nan_faults() {
        let mut s = SafetySupervisor::new(SafetyConfig::default()).unwrap();
        s.handle_event(KillEvent::Arm, 0.0);
        s.handle_event(KillEvent::Engage, 0.0);
        assert_eq!(s.process(v(f64::NAN, 0.0, 0.0), true, 0.0, 1e-3), Vec3::zeros());
        assert_eq!(s.state(), KillState::Killed);
        assert!(s.is_faulted());
        s.handle_event(KillEvent::Rearm, 0.1);
        assert!(!s.is_faulted());
    }

    #[test]
    fn config_validation() {
        assert!(SafetyConfig::default().validate().is_ok());
        assert!(SafetyConfig { force_limit_n: 60.0, ..Default::default() }.validate().is_err());
        assert!(SafetyConfig { force_limit_n: 0.0, ..Default::default() }.validate().is_err());
        assert!(SafetyConfig { jerk_limit_n_per_s: 0.0, ..Default::default() }.validate().is_err());
        assert!(SafetyConfig { fade_s: 0.01, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn calibration_accept_all() {
        let r = calibrate_gain("p01", &mut ScriptedCalibration::default(), &SafetyConfig::default(), 5.0).unwrap();
        assert_eq!(r.accepted_gain, 2.0);
        assert_eq!(r.steps.len(), 5);
        assert!(!r.aborted);
    }

    #[test]
    fn calibration_reject_first() {
        let mut resp = ScriptedCalibration { reject_at: Some(1), ..Default::default() };
        let r = calibrate_gain("p01", &mut resp, &SafetyConfig::default(), 5.0).unwrap();
        assert_eq!(r.accepted_gain, 0.5);
        assert_eq!(r.steps, vec![CalibrationStep { gain: 0.5, accepted: false }]);
    }

    #[test]
    fn calibration_reject_at_four() {
        // simulate the staircase by hand: 25%, 43.75%, 62.5%, 81.25%, 100% of 2.0
        let expected_steps = [0.5, 0.875, 1.25, 1.625, 2.0];
        let mut resp = ScriptedCalibration { reject_at: Some(4), ..Default::default() };
        let r = calibrate_gain("p01", &mut resp, &SafetyConfig::default(), 5.0).unwrap();
        assert_eq!(r.accepted_gain, expected_steps[2]);
        let gains: Vec<f64> = r.steps.iter().map(|s| s.gain).collect();
        assert_eq!(gains, expected_steps[..4]);
        assert_eq!(r.steps.iter().filter(|s| s.accepted).count(), 3);
    }

    #[test]
    fn calibration_timeout() {
        let mut resp = ScriptedCalibration { timeout_at: Some(3), ..Default::default() };
        let r = calibrate_gain("p01", &mut resp, &SafetyConfig::default(), 5.0).unwrap();
        assert!(r.aborted);
        assert_eq!(r.accepted_gain, 0.5);
        assert!(calibrate_gain("p01", &mut resp, &SafetyConfig::default(), 0.0).is_err());
    }
}
