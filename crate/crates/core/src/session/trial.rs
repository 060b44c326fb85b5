//! Trial planning and execution.
//!
//! A trial runs: launch confirmation, a 1.5 s no-force target countdown, the
//! stimulus with the trial's cueing condition, then rating collection. The
//! condition's mode is only active during the stimulus phase.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::control::{ControlLoop, TickStats};
use super::{SessionConfig, SessionError};
use crate::cueing::CueingMode;
use crate::device::{lean_amplitude, DeviceLog};
use crate::safety::{KillEvent, KillState};
use crate::stimulus::{eval_pattern, AccelerationSample, StimulusPattern};
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "H_NONE")]
    HNone,
    #[serde(rename = "H_DIRECT")]
    HDirect,
    #[serde(rename = "H_INDIRECT")]
    HIndirect,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::HNone, Condition::HDirect, Condition::HIndirect];

    pub fn mode(self) -> CueingMode {
        match self {
            Condition::HNone => CueingMode::None,
            Condition::HDirect => CueingMode::Direct,
            Condition::HIndirect => CueingMode::Indirect,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::HNone => "H_NONE",
            Condition::HDirect => "H_DIRECT",
            Condition::HIndirect => "H_INDIRECT",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderMode {
    /// Each consecutive block holds every condition once, shuffled.
    #[default]
    Block,
    /// One shuffle over the whole list.
    FullShuffle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialPlan {
    pub conditions: Vec<Condition>,
    pub reps_per_condition: usize,
    pub seed: u64,
    pub mode: OrderMode,
    pub order: Vec<Condition>,
}

impl TrialPlan {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// True if every consecutive block of `conditions.len()` trials is a permutation of the conditions.
    pub fn has_block_structure(&self) -> bool {
        let k = self.conditions.len();
        k > 0 && self.order.len().is_multiple_of(k) && self.order.chunks(k).all(|block| self.conditions.iter().all(|c| block.contains(c)))
    }
}

pub fn plan_trials(conditions: &[Condition], reps: usize, seed: u64) -> Result<TrialPlan, SessionError> {
    plan_trials_with(conditions, reps, seed, OrderMode::Block)
}

pub fn plan_trials_with(conditions: &[Condition], reps: usize, seed: u64, mode: OrderMode) -> Result<TrialPlan, SessionError> {
    if conditions.is_empty() {
        return Err(SessionError::Config("condition list is empty".into()));
    }
    if reps == 0 {
        return Err(SessionError::Config("reps must be at least 1".into()));
    }
    for (i, c) in conditions.iter().enumerate() {
        if conditions[..i].contains(c) {
            return Err(SessionError::Config(format!("condition {c} listed twice")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::with_capacity(conditions.len() * reps);
    match mode {
        OrderMode::Block => {
            for _ in 0..reps {
                let mut block = conditions.to_vec();
                block.shuffle(&mut rng);
                order.extend(block);
            }
        }
        OrderMode::FullShuffle => {
            for _ in 0..reps {
                order.extend_from_slice(conditions);
            }
            order.shuffle(&mut rng);
        }
    }
    Ok(TrialPlan { conditions: conditions.to_vec(), reps_per_condition: reps, seed, mode, order })
}

/// Integer rating scale. These ranges are artifact conventions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RatingScale {
    pub name: &'static str,
    pub min: i8,
    pub max: i8,
    pub description: &'static str,
}

impl RatingScale {
    pub const RELATIVE_MOTION: RatingScale =
        RatingScale { name: "relative_motion", min: -3, max: 3, description: "-3 environment moving .. +3 self moving" };
    pub const ACCELERATION: RatingScale = RatingScale { name: "acceleration", min: 0, max: 5, description: "0 none .. 5 strong" };
    pub const COMFORT: RatingScale = RatingScale { name: "comfort", min: -3, max: 3, description: "-3 uncomfortable .. +3 comfortable" };
    pub const ALL: [RatingScale; 3] = [Self::RELATIVE_MOTION, Self::ACCELERATION, Self::COMFORT];

    fn check(&self, v: i8) -> Result<(), SessionError> {
        if (self.min..=self.max).contains(&v) {
            Ok(())
        } else {
            Err(SessionError::InvalidRating(format!("{} = {v} not in {}..={}", self.name, self.min, self.max)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratings {
    pub relative_motion: i8,
    pub acceleration: i8,
    pub comfort: i8,
}

impl Ratings {
    pub fn new(relative_motion: i8, acceleration: i8, comfort: i8) -> Result<Self, SessionError> {
        let r = Self { relative_motion, acceleration, comfort };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        RatingScale::RELATIVE_MOTION.check(self.relative_motion)?;
        RatingScale::ACCELERATION.check(self.acceleration)?;
        RatingScale::COMFORT.check(self.comfort)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialPhase {
    LaunchWait,
    Target,
    Stimulus,
    Rating,
    Done,
    Cancelled,
}

impl TrialPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialPhase::LaunchWait => "launch_wait",
            TrialPhase::Target => "target",
            TrialPhase::Stimulus => "stimulus",
            TrialPhase::Rating => "rating",
            TrialPhase::Done => "done",
            TrialPhase::Cancelled => "cancelled",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialTiming {
    pub target_s: f64,
    pub pattern: StimulusPattern,
}

impl Default for TrialTiming {
    fn default() -> Self {
        Self { target_s: 1.5, pattern: StimulusPattern::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialOutcome {
    Completed,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_index: usize,
    pub condition: Condition,
    pub outcome: TrialOutcome,
    pub target_phase_duration: f64,
    pub stimulus_duration: f64,
    pub ratings: Option<Ratings>,
    /// Peak head displacement during the stimulus, m.
    pub lean_peak: f64,
    pub launched_at: f64,
    pub stimulus_start: Option<f64>,
    pub ended_at: f64,
}

impl TrialRecord {
    pub fn is_rated(&self) -> bool {
        self.outcome == TrialOutcome::Completed && self.ratings.is_some()
    }
}

/// Tick-driven state of one trial. The owner ticks the control loop with
/// whatever [`TrialRun::next_input`] asks for, then calls [`TrialRun::after_tick`].
#[derive(Debug, Clone)]
pub struct TrialRun {
    index: usize,
    condition: Condition,
    pattern: StimulusPattern,
    dt: f64,
    phase: TrialPhase,
    phase_tick: u64,
    target_ticks: u64,
    stimulus_ticks: u64,
    launched_at: f64,
    stimulus_start: Option<f64>,
    stimulus_end: Option<f64>,
    ended_at: f64,
}

impl TrialRun {
    /// Starts right after launch confirmation, in the target phase.
    pub fn start(index: usize, condition: Condition, timing: &TrialTiming, dt: f64, now: f64) -> Self {
        let total = timing.pattern.total_duration();
        Self {
            index,
            condition,
            pattern: timing.pattern,
            dt,
            phase: TrialPhase::Target,
            phase_tick: 0,
            target_ticks: (timing.target_s / dt).round() as u64,
            // inclusive of both ends of the pattern
            stimulus_ticks: (total / dt - 1e-9).ceil() as u64 + 1,
            launched_at: now,
            stimulus_start: None,
            stimulus_end: None,
            ended_at: now,
        }
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn condition(&self) -> Condition {
        self.condition
    }

    pub fn phase(&self) -> TrialPhase {
        self.phase
    }

    pub fn phase_time(&self) -> f64 {
        self.phase_tick as f64 * self.dt
    }

    /// Cueing mode and input for the coming tick; `None` outside ticking phases.
    pub fn next_input(&self, now: f64) -> Option<(CueingMode, AccelerationSample)> {
        match self.phase {
            TrialPhase::Target => Some((CueingMode::None, AccelerationSample::new(now, Vec3::zeros()))),
            TrialPhase::Stimulus => {
                let t = self.phase_time().min(self.pattern.total_duration());
                let a = eval_pattern(&self.pattern, t).unwrap_or(0.0);
                Some((self.condition.mode(), AccelerationSample::new(now, Vec3::new(a, 0.0, 0.0))))
            }
            _ => None,
        }
    }

    /// Advances after a tick stamped `now`.
    pub fn after_tick(&mut self, now: f64) {
        match self.phase {
            TrialPhase::Target => {
                self.phase_tick += 1;
                if self.phase_tick >= self.target_ticks {
                    self.phase = TrialPhase::Stimulus;
                    self.phase_tick = 0;
                }
            }
            TrialPhase::Stimulus => {
                if self.phase_tick == 0 {
                    self.stimulus_start = Some(now);
                }
                self.phase_tick += 1;
                self.stimulus_end = Some(now);
                if self.phase_tick >= self.stimulus_ticks {
                    self.phase = TrialPhase::Rating;
                }
            }
            _ => {}
        }
        self.ended_at = now;
    }

    pub fn cancel(&mut self, now: f64) {
        if !matches!(self.phase, TrialPhase::Done | TrialPhase::Cancelled) {
            self.phase = TrialPhase::Cancelled;
            self.ended_at = now;
        }
    }

    /// Builds the record. `log` must contain the ticks of this trial.
    pub fn finish(&mut self, ratings: Option<Ratings>, log: &DeviceLog) -> Result<TrialRecord, SessionError> {
        let outcome = if self.phase == TrialPhase::Cancelled {
            TrialOutcome::Cancelled
        } else {
            if let Some(r) = &ratings {
                r.validate()?;
            }
            self.phase = TrialPhase::Done;
            TrialOutcome::Completed
        };
        let lean_peak = match (self.stimulus_start, self.stimulus_end) {
            (Some(a), Some(b)) => lean_amplitude(log.window(a, b))?,
            _ => 0.0,
        };
        Ok(TrialRecord {
            trial_index: self.index,
            condition: self.condition,
            outcome,
            target_phase_duration: self.target_ticks as f64 * self.dt,
            stimulus_duration: self.pattern.total_duration(),
            ratings: if outcome == TrialOutcome::Completed { ratings } else { None },
            lean_peak,
            launched_at: self.launched_at,
            stimulus_start: self.stimulus_start,
            ended_at: self.ended_at,
        })
    }
}

/// Participant and operator, as seen by the sequencer.
pub trait TrialResponder {
    fn confirm_launch(&mut self, _index: usize) -> bool {
        true
    }

    /// Called before every tick. Returning `true` presses the kill switch.
    fn kill_requested(&mut self, _index: usize, _phase: TrialPhase, _t_in_phase: f64) -> bool {
        false
    }

    fn rate(&mut self, index: usize, condition: Condition) -> Option<Ratings>;

    /// After a cancelled trial: whether the operator rearms and continues.
    fn rearm_after_cancel(&mut self, _index: usize) -> bool {
        true
    }
}

/// Deterministic responder for headless runs.
#[derive(Debug, Clone, Default)]
pub struct ScriptedResponder {
    /// Press kill in trial `.0` at `.1` seconds into the stimulus.
    pub kill_at: Option<(usize, f64)>,
    pub rated: Vec<usize>,
}

impl ScriptedResponder {
    pub fn kill_during(index: usize, t: f64) -> Self {
        Self { kill_at: Some((index, t)), ..Default::default() }
    }

    /// Fixed per-condition pattern with a small index-dependent spread.
    pub fn scripted_ratings(index: usize, condition: Condition) -> Ratings {
        let wobble = (index % 3) as i8 - 1;
        let (rm, acc, comfort) = match condition {
            Condition::HNone => (-1, 1, 2),
            Condition::HDirect => (1, 2, 1),
            Condition::HIndirect => (2, 3, 1),
        };
        Ratings {
            relative_motion: (rm + wobble).clamp(-3, 3),
            acceleration: (acc + wobble).clamp(0, 5),
            comfort: (comfort - wobble).clamp(-3, 3),
        }
    }
}

impl TrialResponder for ScriptedResponder {
    fn kill_requested(&mut self, index: usize, phase: TrialPhase, t: f64) -> bool {
        matches!(self.kill_at, Some((i, at)) if i == index && phase == TrialPhase::Stimulus && t >= at)
    }

    fn rate(&mut self, index: usize, condition: Condition) -> Option<Ratings> {
        self.rated.push(index);
        Some(Self::scripted_ratings(index, condition))
    }
}

/// Runs trial `index` of `plan` to completion on `ctl`. A kill during the
/// trial cancels it; the kill tick already outputs zero force.
pub fn run_trial(
    ctl: &mut ControlLoop,
    plan: &TrialPlan,
    index: usize,
    responder: &mut dyn TrialResponder,
    timing: &TrialTiming,
) -> Result<TrialRecord, SessionError> {
    let condition = *plan.order.get(index).ok_or(SessionError::NoSuchTrial(index))?;
    if ctl.safety_state() != KillState::Engaged {
        return Err(SessionError::NotEngaged(ctl.safety_state().as_str()));
    }
    if !responder.confirm_launch(index) {
        return Err(SessionError::LaunchDeclined(index));
    }
    ctl.settle_head();
    let mut run = TrialRun::start(index, condition, timing, ctl.dt(), ctl.now());
    let log_start = ctl.log().len();
    while let Some((mode, sample)) = run.next_input(ctl.now()) {
        if responder.kill_requested(index, run.phase(), run.phase_time()) {
            ctl.kill_latch().trigger();
        }
        let now = ctl.now();
        ctl.set_mode(mode);
        let tick = ctl.tick(&sample, true);
        if tick.is_err() || ctl.safety_state() != KillState::Engaged {
            run.cancel(now);
            ctl.set_mode(CueingMode::None);
            tick?;
            break;
        }
        run.after_tick(now);
    }
    ctl.set_mode(CueingMode::None);

    let ratings = if run.phase() == TrialPhase::Rating { responder.rate(index, condition) } else { None };
    let mut trial_log = DeviceLog::new();
    for r in &ctl.log().records()[log_start..] {
        trial_log.push(*r)?;
    }
    run.finish(ratings, &trial_log)
}

#[derive(Debug)]
pub struct SessionOutcome {
    pub plan: TrialPlan,
    pub records: Vec<TrialRecord>,
    pub log: DeviceLog,
    pub stats: TickStats,
}

impl SessionOutcome {
    /// Log records belonging to a trial, from launch to its last tick.
    pub fn trial_log(&self, record: &TrialRecord) -> &[crate::device::LogRecord] {
        self.log.window(record.launched_at, record.ended_at)
    }
}

/// Runs every trial of `plan` in order on a fresh control loop.
pub fn run_session(cfg: &SessionConfig, plan: &TrialPlan, responder: &mut dyn TrialResponder) -> Result<SessionOutcome, SessionError> {
    let mut ctl = ControlLoop::new(cfg)?;
    ctl.set_mode(CueingMode::None);
    ctl.engage();
    let timing = TrialTiming { pattern: cfg.stimulus, ..Default::default() };
    let mut records = Vec::with_capacity(plan.len());
    for index in 0..plan.len() {
        if ctl.safety_state() != KillState::Engaged {
            if !responder.rearm_after_cancel(index) {
                break;
            }
            ctl.handle_event(KillEvent::Rearm);
            ctl.engage();
        }
        let rec = run_trial(&mut ctl, plan, index, responder, &timing)?;
        log::info!("trial {index} {} {:?}", rec.condition, rec.outcome);
        records.push(rec);
    }
    let stats = ctl.stats();
    let log = ctl.take_log();
    if let Some(path) = &cfg.log_path {
        log.export(path)?;
    }
    Ok(SessionOutcome { plan: plan.clone(), records, log, stats })
}
