//! The fixed-rate control loop.

use std::net::SocketAddr;
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::{SessionConfig, SessionError, SourceKind};
use crate::cueing::{CueingMode, CueingPipeline, WrenchCommand};
use crate::device::{lean_amplitude, Device, DeviceLog, ExportRecord, HeadState, PlantConfig, SimulatedDevice};
use crate::safety::{KillEvent, KillLatch, KillState, SafetySupervisor};
use crate::stimulus::{eval_pattern, load_trace, AccelerationSample, StimulusPattern, Trace, TraceSource};
use crate::telemetry::{check_staleness, FeedStatus, Mailbox, UdpReceiver};
use crate::Vec3;

/// Overrun ratio above which a run report carries a warning.
const OVERRUN_WARN_RATIO: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pacing {
    /// Ticks back to back; an overrun is a tick whose compute exceeds the period.
    #[default]
    FreeRun,
    /// Sleep to wall-clock deadlines; an overrun is a missed deadline.
    RealTime,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct TickStats {
    pub ticks: u64,
    pub total_compute_s: f64,
    pub max_compute_us: f64,
    pub overruns: u64,
    pub period_us: f64,
}

impl TickStats {
    pub fn mean_compute_us(&self) -> f64 {
        if self.ticks == 0 {
            0.0
        } else {
            self.total_compute_s * 1e6 / self.ticks as f64
        }
    }

    pub fn overrun_ratio(&self) -> f64 {
        if self.ticks == 0 {
            0.0
        } else {
            self.overruns as f64 / self.ticks as f64
        }
    }

    fn record(&mut self, compute: Duration) {
        let us = compute.as_secs_f64() * 1e6;
        self.ticks += 1;
        self.total_compute_s += compute.as_secs_f64();
        self.max_compute_us = self.max_compute_us.max(us);
    }
}

/// Owns cueing, safety and plant state. One instance per session, driven
/// from a single thread.
pub struct ControlLoop {
    dt: f64,
    ticks: u64,
    pipeline: CueingPipeline,
    safety: SafetySupervisor,
    device: SimulatedDevice,
    max_gain: f64,
    stats: TickStats,
    free_run: bool,
}

impl ControlLoop {
    pub fn new(cfg: &SessionConfig) -> Result<Self, SessionError> {
        cfg.validate()?;
        let conf = |e: &dyn std::fmt::Display| SessionError::Config(e.to_string());
        let dt = cfg.tick_dt();
        Ok(Self {
            dt,
            ticks: 0,
            pipeline: CueingPipeline::new(cfg.cueing).map_err(|e| conf(&e))?,
            safety: SafetySupervisor::new(cfg.safety).map_err(|e| conf(&e))?,
            device: SimulatedDevice::new(cfg.plant)?,
            max_gain: cfg.max_gain(),
            stats: TickStats { period_us: dt * 1e6, ..Default::default() },
            free_run: true,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Time stamp the next tick will carry.
    pub fn now(&self) -> f64 {
        self.ticks as f64 * self.dt
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    pub fn handle_event(&mut self, event: KillEvent) {
        let now = self.now();
        self.safety.handle_event(event, now);
        if event == KillEvent::Rearm && self.safety.state() == KillState::Disarmed {
            self.device.clear_fault();
        }
    }

    /// DISARMED/ARMED -> ENGAGED.
    pub fn engage(&mut self) {
        self.handle_event(KillEvent::Arm);
        self.handle_event(KillEvent::Engage);
    }

    pub fn kill_latch(&self) -> KillLatch {
        self.safety.latch()
    }

    pub fn safety_state(&self) -> KillState {
        self.safety.state()
    }

    pub fn safety(&self) -> &SafetySupervisor {
        &self.safety
    }

    pub fn gain(&self) -> f64 {
        self.pipeline.config().gain
    }

    pub fn max_gain(&self) -> f64 {
        self.max_gain
    }

    /// Upper gain bound, typically a calibration result.
    pub fn set_max_gain(&mut self, max_gain: f64) {
        if max_gain.is_finite() && max_gain >= 0.0 {
            self.max_gain = max_gain;
            if self.gain() > max_gain {
                self.pipeline.set_gain(max_gain);
            }
        }
    }

    /// Applies from the next tick. Returns the gain actually in effect.
    pub fn set_gain(&mut self, gain: f64) -> f64 {
        if gain.is_finite() {
            self.pipeline.set_gain(gain.clamp(0.0, self.max_gain));
        }
        self.gain()
    }

    pub fn mode(&self) -> CueingMode {
        self.pipeline.config().mode
    }

    pub fn set_mode(&mut self, mode: CueingMode) {
        self.pipeline.set_mode(mode);
    }

    pub fn head(&self) -> HeadState {
        self.device.head()
    }

    /// Puts the head back at rest in the workspace center. Used at trial
    /// launch: the untimed launch and rating phases stand in for a rest.
    pub fn settle_head(&mut self) {
        self.device.set_state(HeadState::default());
    }

    pub fn device_mut(&mut self) -> &mut SimulatedDevice {
        &mut self.device
    }

    pub fn log(&self) -> &DeviceLog {
        self.device.log()
    }

    pub fn take_log(&mut self) -> DeviceLog {
        self.device.take_log()
    }

    pub fn stats(&self) -> TickStats {
        self.stats
    }

    pub(crate) fn set_pacing(&mut self, pacing: Pacing) {
        self.free_run = pacing == Pacing::FreeRun;
    }

    pub(crate) fn count_overrun(&mut self) {
        self.stats.overruns += 1;
    }

    /// One control tick: cueing and safety, then the device. A device error
    /// is a hard fault: the kill switch latches and the error is returned.
    pub fn tick(&mut self, sample: &AccelerationSample, feed_live: bool) -> Result<WrenchCommand, SessionError> {
        let start = Instant::now();
        let now = self.now();
        let head = self.device.head();
        let cmd = self.pipeline.tick(sample, &head, &mut self.safety, feed_live, now, self.dt);
        let result = self.device.send(cmd).and_then(|_| self.device.step(self.dt));
        self.ticks += 1;
        let elapsed = start.elapsed();
        self.stats.record(elapsed);
        if self.free_run && elapsed.as_secs_f64() > self.dt {
            self.stats.overruns += 1;
        }
        match result {
            Ok(_) => Ok(cmd),
            Err(e) => {
                self.safety.fault(now);
                Err(SessionError::HardFault { t: now, reason: e.to_string() })
            }
        }
    }
}

/// Live telemetry through the mailbox, held between updates.
pub struct LiveInput {
    mailbox: Mailbox,
    feed: FeedStatus,
    recording: Option<Vec<AccelerationSample>>,
}

impl LiveInput {
    pub fn new(mailbox: Mailbox, staleness_timeout: f64) -> Self {
        Self { mailbox, feed: FeedStatus::new(staleness_timeout), recording: None }
    }

    /// Keep every per-tick input so the run can be replayed as a trace.
    pub fn recording(mut self) -> Self {
        self.recording = Some(Vec::new());
        self
    }

    pub fn feed(&self) -> FeedStatus {
        self.feed
    }
}

pub enum InputSource {
    Stimulus(StimulusPattern),
    Trace(Trace),
    Live(LiveInput),
    Zero,
}

impl InputSource {
    /// Input for the tick at time `t` and whether the feed counts as live.
    pub fn sample(&mut self, t: f64) -> (AccelerationSample, bool) {
        match self {
            InputSource::Stimulus(p) => {
                let a = eval_pattern(p, t).unwrap_or(0.0);
                (AccelerationSample::new(t, Vec3::new(a, 0.0, 0.0)), true)
            }
            InputSource::Trace(tr) => (AccelerationSample::new(t, tr.accel_at(t)), true),
            InputSource::Live(live) => {
                let latest = live.mailbox.latest();
                if let Some(s) = latest {
                    live.feed = live.feed.record_sample(s.timestamp);
                }
                live.feed = check_staleness(live.feed, t);
                let accel = latest.map_or_else(Vec3::zeros, |s| s.accel);
                if let Some(rec) = live.recording.as_mut() {
                    rec.push(AccelerationSample::new(t, accel));
                }
                (AccelerationSample::new(t, accel), live.feed.is_live())
            }
            InputSource::Zero => (AccelerationSample::new(t, Vec3::zeros()), true),
        }
    }

    /// Inputs seen so far by a recording live source, as a replayable trace.
    pub fn recorded_trace(&self, rate: f64) -> Option<Trace> {
        match self {
            InputSource::Live(LiveInput { recording: Some(r), .. }) if !r.is_empty() => Trace::new(r.clone(), rate, TraceSource::Live).ok(),
            _ => None,
        }
    }
}

#[derive(Debug)]
pub struct RunReport {
    pub log: DeviceLog,
    pub stats: TickStats,
    pub fault: Option<String>,
    pub warnings: Vec<String>,
    pub recorded_input: Option<Trace>,
}

impl RunReport {
    pub fn summary_line(&self) -> String {
        format!(
            "{} ticks, mean {:.2} us, max {:.2} us, {} overruns ({:.3}%)",
            self.stats.ticks,
            self.stats.mean_compute_us(),
            self.stats.max_compute_us,
            self.stats.overruns,
            self.stats.overrun_ratio() * 100.0
        )
    }
}

/// Runs `cfg.source` for `duration` seconds, free-running, with the kill
/// switch engaged at the start.
pub fn run_loop(cfg: &SessionConfig, duration: f64) -> Result<RunReport, SessionError> {
    let mut _rx = None;
    let source = match cfg.source {
        SourceKind::SyntheticStimulus => InputSource::Stimulus(cfg.stimulus),
        SourceKind::TraceReplay => {
            let path = cfg.trace_path.as_ref().ok_or_else(|| SessionError::Config("trace_path missing".into()))?;
            InputSource::Trace(load_trace(path)?)
        }
        SourceKind::LiveUdp => {
            let mailbox = Mailbox::new();
            let map = cfg.telemetry.channel_map().map_err(|e| SessionError::Config(e.to_string()))?;
            let bind = SocketAddr::from(([0, 0, 0, 0], cfg.telemetry.port));
            _rx = Some(UdpReceiver::spawn(bind, map, mailbox.clone(), Instant::now())?);
            InputSource::Live(LiveInput::new(mailbox, cfg.telemetry.staleness_timeout_s).recording())
        }
    };
    let pacing = if cfg.source == SourceKind::LiveUdp { Pacing::RealTime } else { Pacing::FreeRun };
    run_loop_with(cfg, source, duration, pacing)
}

/// Runs ⌈duration · tick_rate⌉ ticks from `source`. A hard fault stops the
/// run; the partial log is still returned and written to `cfg.log_path`.
pub fn run_loop_with(cfg: &SessionConfig, mut source: InputSource, duration: f64, pacing: Pacing) -> Result<RunReport, SessionError> {
    if !(duration.is_finite() && duration >= 0.0) {
        return Err(SessionError::Config("duration must be non-negative".into()));
    }
    let mut ctl = ControlLoop::new(cfg)?;
    ctl.set_pacing(pacing);
    ctl.engage();
    let n = (duration * cfg.tick_rate_hz - 1e-9).ceil().max(0.0) as u64;
    let period = Duration::from_secs_f64(ctl.dt());
    let start = Instant::now();
    let mut fault = None;
    for i in 0..n {
        let t = ctl.now();
        let (sample, live) = source.sample(t);
        if let Err(e) = ctl.tick(&sample, live) {
            log::error!("{e}");
            fault = Some(e.to_string());
            break;
        }
        if pacing == Pacing::RealTime {
            let deadline = start + period * (i as u32 + 1);
            let now = Instant::now();
            if now > deadline {
                ctl.count_overrun();
            } else {
                thread::sleep(deadline - now);
            }
        }
    }

    let stats = ctl.stats();
    let mut warnings = Vec::new();
    if stats.overrun_ratio() > OVERRUN_WARN_RATIO {
        warnings.push(format!("overrun ratio {:.1}% exceeds {:.0}%", stats.overrun_ratio() * 100.0, OVERRUN_WARN_RATIO * 100.0));
    }
    if stats.mean_compute_us() > cfg.tick_budget_us {
        warnings.push(format!("mean tick compute {:.1} us exceeds budget {:.1} us", stats.mean_compute_us(), cfg.tick_budget_us));
    }
    let log = ctl.take_log();
    if let Some(path) = &cfg.log_path {
        log.export(path)?;
    }
    Ok(RunReport { log, stats, fault, warnings, recorded_input: source.recorded_trace(cfg.tick_rate_hz) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub records: usize,
    pub max_position_error_m: f64,
    pub max_orientation_error: f64,
    pub peak_force_n: f64,
    pub lean_peak_m: f64,
    /// Every replayed state matched the logged one bit for bit.
    pub identical: bool,
}

/// Drives a fresh plant with the commands of an exported log and compares the
/// resulting head states against the logged ones.
pub fn replay_log(records: &[ExportRecord], plant: &PlantConfig) -> Result<ReplayReport, SessionError> {
    if records.is_empty() {
        return Err(SessionError::Device(crate::device::DeviceError::EmptyWindow));
    }
    let dt = match records {
        [a, b, ..] => b.t - a.t,
        _ => plant.integrator_dt_s,
    };
    if !(dt.is_finite() && dt > 0.0) {
        return Err(SessionError::Config("log timestamps must increase".into()));
    }
    let mut dev = SimulatedDevice::new(*plant)?;
    let mut max_pos: f64 = 0.0;
    let mut max_rot: f64 = 0.0;
    let mut identical = true;
    for r in records {
        dev.send(r.command())?;
        let s = dev.step(dt)?;
        let q = s.orientation.quaternion();
        let exact = s.position == r.position() && [q.i, q.j, q.k, q.w] == [r.qx, r.qy, r.qz, r.qw];
        identical &= exact;
        max_pos = max_pos.max((s.position - r.position()).norm());
        max_rot = max_rot.max(s.orientation.angle_to(&r.orientation()));
    }
    Ok(ReplayReport {
        records: records.len(),
        max_position_error_m: max_pos,
        max_orientation_error: max_rot,
        peak_force_n: records.iter().map(|r| r.force().norm()).fold(0.0, f64::max),
        lean_peak_m: lean_amplitude(dev.log().records())?,
        identical,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cueing::CueingMode;

    fn cfg(mode: CueingMode) -> SessionConfig {
        let mut c = SessionConfig::default();
        c.cueing.mode = mode;
        c
    }

    #[test]
    fn none_mode_all_zero() {
        let r = run_loop(&cfg(CueingMode::None), 10.0).unwrap();
        assert_eq!(r.log.len(), 10_000);
        assert!(r.log.records().iter().all(|rec| rec.commanded.force == Vec3::zeros()));
    }

    #[test]
    fn indirect_peak_is_ten_newtons() {
        let r = run_loop(&cfg(CueingMode::Indirect), 10.0).unwrap();
        let peak = r.log.records().iter().map(|rec| rec.commanded.force.norm()).fold(0.0, f64::max);
        assert!((peak - 10.0).abs() < 1e-12, "{peak}");
        // on the first plateau the force points backwards
        let mid = r.log.window(2.0, 2.0)[0];
        assert!((mid.commanded.force - Vec3::new(-10.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn tick_count_rounds_up() {
        let r = run_loop(&cfg(CueingMode::None), 0.0105).unwrap();
        assert_eq!(r.log.len(), 11);
    }

    #[test]
    fn gain_is_clamped_to_bound() {
        let mut ctl = ControlLoop::new(&SessionConfig::default()).unwrap();
        assert_eq!(ctl.set_gain(5.0), 2.0);
        assert_eq!(ctl.set_gain(-1.0), 0.0);
        assert_eq!(ctl.set_gain(1.2), 1.2);
        ctl.set_max_gain(1.0);
        assert_eq!(ctl.gain(), 1.0);
    }

    #[test]
    fn device_fault_kills() {
        let mut ctl = ControlLoop::new(&SessionConfig::default()).unwrap();
        ctl.engage();
        ctl.device_mut().inject_fault();
        let err = ctl.tick(&AccelerationSample::new(0.0, Vec3::x()), true).unwrap_err();
        assert!(matches!(err, SessionError::HardFault { .. }));
        assert_eq!(ctl.safety_state(), KillState::Killed);
    }

    #[test]
    fn live_input_holds_and_goes_stale() {
        let mb = Mailbox::new();
        let mut src = InputSource::Live(LiveInput::new(mb.clone(), 0.2));
        let (s, live) = src.sample(0.0);
        assert!(!live);
        assert_eq!(s.accel, Vec3::zeros());
        mb.publish(AccelerationSample::new(0.01, Vec3::new(1.0, 0.0, 0.0)));
        let (s, live) = src.sample(0.05);
        assert!(live);
        assert_eq!(s.accel.x, 1.0);
        let (s, live) = src.sample(0.15);
        assert!(live);
        assert_eq!(s.accel.x, 1.0);
        let (_, live) = src.sample(0.3);
        assert!(!live);
    }

    #[test]
    fn replay_of_exported_log_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(CueingMode::Indirect);
        c.log_path = Some(dir.path().join("run.jsonl"));
        run_loop(&c, 3.0).unwrap();
        let recs = crate::device::read_export(dir.path().join("run.jsonl")).unwrap();
        let rep = replay_log(&recs, &c.plant).unwrap();
        assert_eq!(rep.records, 3000);
        assert!(rep.identical, "{rep:?}");
        assert!(rep.lean_peak_m > 0.0);
    }
}
