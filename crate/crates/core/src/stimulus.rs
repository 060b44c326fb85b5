//! Displacement stimulus synthesis and acceleration traces.
//!
//! The stimulus is a double step: forward acceleration for one step, then the
//! mirrored deceleration. Each step eases in and out with a raised-cosine ramp
//! so the acceleration is continuous and the net velocity change is zero.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Vec3;

/// Lowest sample rate accepted by [`synthesize_trace`].
pub const MIN_SYNTH_RATE_HZ: f64 = 100.0;

/// Header line of the trace file format.
pub const TRACE_HEADER: &str = "t,ax,ay,az";

#[derive(Debug, Error)]
pub enum StimulusError {
    #[error("time {t} s outside pattern domain [0, {total}] s")]
    Domain { t: f64, total: f64 },
    #[error("invalid stimulus pattern: {0}")]
    InvalidPattern(&'static str),
    #[error("sample rate {0} Hz below minimum of {MIN_SYNTH_RATE_HZ} Hz")]
    RateTooLow(f64),
    #[error("trace is empty")]
    EmptyTrace,
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: timestamp decreases")]
    NonMonotonic { line: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Eased double-step acceleration profile on the forward axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StimulusPattern {
    /// Plateau acceleration, m/s².
    pub step_amplitude: f64,
    /// Time held at full amplitude within each step, s.
    pub plateau_duration: f64,
    /// Length of each raised-cosine ramp, s.
    pub ease_duration: f64,
}

impl Default for StimulusPattern {
    fn default() -> Self {
        Self { step_amplitude: 5.0, plateau_duration: 4.0, ease_duration: 0.5 }
    }
}

impl StimulusPattern {
    pub fn new(step_amplitude: f64, plateau_duration: f64, ease_duration: f64) -> Result<Self, StimulusError> {
        let p = Self { step_amplitude, plateau_duration, ease_duration };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), StimulusError> {
        if !(self.step_amplitude.is_finite() && self.step_amplitude > 0.0) {
            return Err(StimulusError::InvalidPattern("step_amplitude must be positive"));
        }
        if !(self.ease_duration.is_finite() && self.ease_duration > 0.0) {
            return Err(StimulusError::InvalidPattern("ease_duration must be positive"));
        }
        if !(self.plateau_duration.is_finite() && self.plateau_duration >= 0.0) {
            return Err(StimulusError::InvalidPattern("plateau_duration must be non-negative"));
        }
        Ok(())
    }

    /// Ramp up, plateau, ramp down.
    pub fn step_duration(&self) -> f64 {
        2.0 * self.ease_duration + self.plateau_duration
    }

    pub fn total_duration(&self) -> f64 {
        2.0 * self.step_duration()
    }

    /// Upper bound on |d/dt eval_pattern|.
    pub fn max_slope(&self) -> f64 {
        PI * self.step_amplitude / (2.0 * self.ease_duration)
    }

    /// One positive step evaluated at `s` seconds into the step.
    fn step_profile(&self, s: f64) -> f64 {
        let a = self.step_amplitude;
        let tau = self.ease_duration;
        let ease = |u: f64| a * (1.0 - (PI * u / tau).cos()) / 2.0;
        if s < tau {
            ease(s)
        } else if s <= tau + self.plateau_duration {
            a
        } else {
            ease((self.step_duration() - s).max(0.0))
        }
    }
}

/// Forward-axis acceleration of the pattern at time `t`.
pub fn eval_pattern(p: &StimulusPattern, t: f64) -> Result<f64, StimulusError> {
    let total = p.total_duration();
    if !(0.0..=total).contains(&t) {
        return Err(StimulusError::Domain { t, total });
    }
    let half = p.step_duration();
    Ok(if t <= half { p.step_profile(t) } else { -p.step_profile(t - half) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccelerationSample {
    /// Seconds, monotonic within a trace.
    pub timestamp: f64,
    /// Vehicle-frame acceleration, m/s².
    pub accel: Vec3,
}

impl AccelerationSample {
    pub fn new(timestamp: f64, accel: Vec3) -> Self {
        Self { timestamp, accel }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSource {
    Synthetic,
    Recorded,
    Live,
}

/// Ordered, non-empty sequence of acceleration samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    samples: Vec<AccelerationSample>,
    sample_rate: f64,
    source: TraceSource,
}

impl Trace {
    pub fn new(samples: Vec<AccelerationSample>, sample_rate: f64, source: TraceSource) -> Result<Self, StimulusError> {
        if samples.is_empty() {
            return Err(StimulusError::EmptyTrace);
        }
        for (i, w) in samples.windows(2).enumerate() {
            if w[1].timestamp < w[0].timestamp {
                return Err(StimulusError::NonMonotonic { line: i + 2 });
            }
        }
        Ok(Self { samples, sample_rate, source })
    }

    pub fn samples(&self) -> &[AccelerationSample] {
        &self.samples
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn source(&self) -> TraceSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples[self.samples.len() - 1].timestamp - self.samples[0].timestamp
    }

    /// Linearly interpolated acceleration at `t`. Before the first sample the
    /// first value is held; after the last sample the result is zero (the
    /// recording is over, nothing is moving).
    pub fn accel_at(&self, t: f64) -> Vec3 {
        let first = &self.samples[0];
        let last = &self.samples[self.samples.len() - 1];
        if t <= first.timestamp {
            return first.accel;
        }
        if t > last.timestamp {
            return Vec3::zeros();
        }
        // first index with timestamp >= t; guaranteed >= 1 here
        let hi = self.samples.partition_point(|s| s.timestamp < t);
        let b = &self.samples[hi];
        if b.timestamp == t {
            return b.accel;
        }
        let a = &self.samples[hi - 1];
        let span = b.timestamp - a.timestamp;
        if span <= 0.0 {
            return b.accel;
        }
        let frac = (t - a.timestamp) / span;
        a.accel + (b.accel - a.accel) * frac
    }

    /// Serializes in the `t,ax,ay,az` text format. Values use shortest
    /// round-trip formatting, so a save/load cycle is lossless.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.samples.len() * 32);
        out.push_str(TRACE_HEADER);
        out.push('\n');
        for s in &self.samples {
            let _ = writeln!(out, "{},{},{},{}", s.timestamp, s.accel.x, s.accel.y, s.accel.z);
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StimulusError> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Samples the pattern at `rate` Hz from 0 through the end of the pattern.
pub fn synthesize_trace(p: &StimulusPattern, rate: f64) -> Result<Trace, StimulusError> {
    p.validate()?;
    if !(rate.is_finite() && rate >= MIN_SYNTH_RATE_HZ) {
        return Err(StimulusError::RateTooLow(rate));
    }
    let total = p.total_duration();
    // guard against 10.000000000000002 * 1000 style rounding
    let intervals = (total * rate - 1e-9).ceil().max(0.0) as usize;
    let samples = (0..=intervals)
        .map(|i| {
            let t = (i as f64 / rate).min(total);
            let a = eval_pattern(p, t).expect("t clamped into domain");
            AccelerationSample::new(t, Vec3::new(a, 0.0, 0.0))
        })
        .collect();
    Trace::new(samples, rate, TraceSource::Synthetic)
}

/// Parses trace text. Timestamps are shifted so the first sample is at 0.
pub fn parse_trace(text: &str) -> Result<Trace, StimulusError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        None => return Err(StimulusError::EmptyTrace),
        Some((i, header)) => {
            if header.trim() != TRACE_HEADER {
                return Err(StimulusError::Parse { line: i + 1, reason: format!("expected header `{TRACE_HEADER}`") });
            }
        }
    }

    let mut samples: Vec<AccelerationSample> = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 4 {
            return Err(StimulusError::Parse { line: line_no, reason: format!("expected 4 fields, found {}", fields.len()) });
        }
        let mut vals = [0.0; 4];
        for (v, f) in vals.iter_mut().zip(&fields) {
            *v = f.trim().parse::<f64>().map_err(|e| StimulusError::Parse { line: line_no, reason: format!("`{f}`: {e}") })?;
            if !v.is_finite() {
                return Err(StimulusError::Parse { line: line_no, reason: format!("non-finite value `{f}`") });
            }
        }
        if let Some(prev) = samples.last() {
            if vals[0] < prev.timestamp {
                return Err(StimulusError::NonMonotonic { line: line_no });
            }
        }
        samples.push(AccelerationSample::new(vals[0], Vec3::new(vals[1], vals[2], vals[3])));
    }

    if samples.is_empty() {
        return Err(StimulusError::EmptyTrace);
    }
    let t0 = samples[0].timestamp;
    if t0 != 0.0 {
        for s in &mut samples {
            s.timestamp -= t0;
        }
    }
    let duration = samples[samples.len() - 1].timestamp;
    let rate = if samples.len() > 1 && duration > 0.0 { (samples.len() - 1) as f64 / duration } else { 0.0 };
    Trace::new(samples, rate, TraceSource::Recorded)
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Trace, StimulusError> {
    parse_trace(&fs::read_to_string(path)?)
}
