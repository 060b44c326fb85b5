//! Session orchestration: the fixed-rate control loop, the trial sequencer,
//! rating summaries and the operator console service.

mod config;
mod control;
pub mod service;
mod summary;
mod trial;

use thiserror::Error;

pub use config::{SessionConfig, SourceKind, MIN_TICK_RATE_HZ};
pub use control::{replay_log, run_loop, run_loop_with, ControlLoop, InputSource, LiveInput, Pacing, ReplayReport, RunReport, TickStats};
pub use summary::{quantile, summarize, ConditionSummary, RatingStats, Summary};
pub use trial::{
    plan_trials, plan_trials_with, run_session, run_trial, Condition, OrderMode, RatingScale, Ratings, ScriptedResponder, SessionOutcome,
    TrialOutcome, TrialPhase, TrialPlan, TrialRecord, TrialResponder, TrialRun, TrialTiming,
};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("config: {0}")]
    Config(String),
    #[error("hard fault at t={t:.4} s: {reason}")]
    HardFault { t: f64, reason: String },
    #[error("kill switch must be ENGAGED (is {0})")]
    NotEngaged(&'static str),
    #[error("trial index {0} out of range")]
    NoSuchTrial(usize),
    #[error("launch not confirmed for trial {0}")]
    LaunchDeclined(usize),
    #[error("rating out of range: {0}")]
    InvalidRating(String),
    #[error("no rated trials to summarize")]
    EmptySummary,
    #[error(transparent)]
    Stimulus(#[from] crate::stimulus::StimulusError),
    #[error(transparent)]
    Device(#[from] crate::device::DeviceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
