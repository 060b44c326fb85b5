//! C ABI for the kinhmd cueing engine.
//!
//! Every entry point returns a [`KinhmdStatus`]; on failure a message is
//! kept per thread and can be read with [`kinhmd_last_error_message`].
//! Handles are opaque and owned by the caller until passed to the matching
//! `_free` function. An engine handle is not thread-safe; a kill latch
//! handle may be triggered from any thread.
//!
//! Enumerations cross the boundary as plain integers (see the `KINHMD_MODE_*`,
//! `KINHMD_EVENT_*` and `KINHMD_STATE_*` constants) so an out-of-range value
//! from C is reported instead of being undefined behavior.
//!
//! # Safety
//!
//! All pointer arguments must be null or valid for the access the function
//! makes: handles must come from the matching constructor and not be freed
//! yet, `out` pointers must be writable, C strings NUL terminated, and byte
//! buffers readable for the given length.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use kinhmd::safety::KillLatch;
use kinhmd::session::{ControlLoop, SessionConfig, SessionError};
use kinhmd::stimulus::eval_pattern;
use kinhmd::telemetry::{extract_sample, parse_packet, ChannelMap, DataPacket};
use kinhmd::{
    AccelerationSample, CueingConfig, CueingMode, KillEvent, KillState, PlantConfig, SafetyConfig, StimulusPattern, TorqueMode, Vec3,
};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KinhmdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    /// The device rejected a command; the kill switch has latched.
    HardFault = 4,
    ParseError = 5,
    /// The packet holds no usable record for the requested channel map.
    NoSample = 6,
    Io = 7,
    Panic = 99,
}

pub const KINHMD_MODE_DIRECT: u32 = 0;
pub const KINHMD_MODE_INDIRECT: u32 = 1;
pub const KINHMD_MODE_NONE: u32 = 2;

pub const KINHMD_EVENT_ARM: u32 = 0;
pub const KINHMD_EVENT_ENGAGE: u32 = 1;
pub const KINHMD_EVENT_RELEASE: u32 = 2;
pub const KINHMD_EVENT_KILL: u32 = 3;
pub const KINHMD_EVENT_REARM: u32 = 4;

pub const KINHMD_STATE_DISARMED: u32 = 0;
pub const KINHMD_STATE_ARMED: u32 = 1;
pub const KINHMD_STATE_ENGAGED: u32 = 2;
pub const KINHMD_STATE_KILLED: u32 = 3;

pub const KINHMD_TORQUE_FREE: u32 = 0;
pub const KINHMD_TORQUE_CYLINDER: u32 = 1;

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KinhmdVec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl From<Vec3> for KinhmdVec3 {
    fn from(v: Vec3) -> Self {
        Self { x: v.x, y: v.y, z: v.z }
    }
}

impl From<KinhmdVec3> for Vec3 {
    fn from(v: KinhmdVec3) -> Self {
        Vec3::new(v.x, v.y, v.z)
    }
}

/// Engine settings. Fill with [`kinhmd_config_default`], then adjust.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinhmdConfig {
    pub tick_rate_hz: f64,
    /// One of `KINHMD_MODE_*`.
    pub cueing_mode: u32,
    pub gain: f64,
    pub torque_deadband_n: f64,
    pub force_limit_n: f64,
    pub jerk_limit_n_per_s: f64,
    pub fade_s: f64,
    pub head_mass_kg: f64,
    pub neck_stiffness_n_per_m: f64,
    pub neck_damping_n_s_per_m: f64,
}

/// Output of one tick.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KinhmdWrench {
    pub force: KinhmdVec3,
    /// One of `KINHMD_TORQUE_*`.
    pub torque_mode: u32,
    /// Free rotation axis when `torque_mode` is `KINHMD_TORQUE_CYLINDER`, else zero.
    pub axis: KinhmdVec3,
    pub timestamp: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KinhmdHead {
    pub position: KinhmdVec3,
    pub velocity: KinhmdVec3,
    /// Unit quaternion, x y z w.
    pub orientation: [f64; 4],
    pub angular_velocity: KinhmdVec3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinhmdStimulus {
    pub step_amplitude: f64,
    pub plateau_duration: f64,
    pub ease_duration: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KinhmdDataRecord {
    pub index: u32,
    pub values: [f32; 8],
}

/// Control loop with its simulated device.
pub struct KinhmdEngine {
    ctl: ControlLoop,
}

/// Thread-safe handle that kills an engine on its next tick.
pub struct KinhmdKillLatch {
    latch: KillLatch,
}

/// A parsed telemetry datagram.
pub struct KinhmdPacket {
    packet: DataPacket,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: KinhmdStatus, msg: impl Into<String>) -> KinhmdStatus {
    set_error(msg);
    status
}

/// Runs `f`, turning a panic into `KinhmdStatus::Panic`.
fn guard(f: impl FnOnce() -> KinhmdStatus) -> KinhmdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| p.downcast_ref::<String>().cloned());
            fail(KinhmdStatus::Panic, format!("panic: {}", msg.unwrap_or_else(|| "unknown".into())))
        }
    }
}

macro_rules! deref {
    ($p:expr, $name:literal) => {
        match unsafe { $p.as_ref() } {
            Some(v) => v,
            None => return fail(KinhmdStatus::NullPointer, concat!($name, " is null")),
        }
    };
}

macro_rules! deref_mut {
    ($p:expr, $name:literal) => {
        match unsafe { $p.as_mut() } {
            Some(v) => v,
            None => return fail(KinhmdStatus::NullPointer, concat!($name, " is null")),
        }
    };
}

fn session_status(e: &SessionError) -> KinhmdStatus {
    match e {
        SessionError::Config(_) => KinhmdStatus::InvalidConfig,
        SessionError::HardFault { .. } => KinhmdStatus::HardFault,
        SessionError::Io(_) => KinhmdStatus::Io,
        _ => KinhmdStatus::InvalidArgument,
    }
}

fn mode_from(code: u32) -> Option<CueingMode> {
    match code {
        KINHMD_MODE_DIRECT => Some(CueingMode::Direct),
        KINHMD_MODE_INDIRECT => Some(CueingMode::Indirect),
        KINHMD_MODE_NONE => Some(CueingMode::None),
        _ => None,
    }
}

fn mode_code(mode: CueingMode) -> u32 {
    match mode {
        CueingMode::Direct => KINHMD_MODE_DIRECT,
        CueingMode::Indirect => KINHMD_MODE_INDIRECT,
        CueingMode::None => KINHMD_MODE_NONE,
    }
}

fn state_code(s: KillState) -> u32 {
    match s {
        KillState::Disarmed => KINHMD_STATE_DISARMED,
        KillState::Armed => KINHMD_STATE_ARMED,
        KillState::Engaged => KINHMD_STATE_ENGAGED,
        KillState::Killed => KINHMD_STATE_KILLED,
    }
}

fn event_from(code: u32) -> Option<KillEvent> {
    match code {
        KINHMD_EVENT_ARM => Some(KillEvent::Arm),
        KINHMD_EVENT_ENGAGE => Some(KillEvent::Engage),
        KINHMD_EVENT_RELEASE => Some(KillEvent::Release),
        KINHMD_EVENT_KILL => Some(KillEvent::Kill),
        KINHMD_EVENT_REARM => Some(KillEvent::Rearm),
        _ => None,
    }
}

fn session_config(c: &KinhmdConfig) -> Result<SessionConfig, String> {
    let d = SessionConfig::default();
    let mode = mode_from(c.cueing_mode).ok_or_else(|| format!("unknown cueing mode {}", c.cueing_mode))?;
    Ok(SessionConfig {
        tick_rate_hz: c.tick_rate_hz,
        cueing: CueingConfig { mode, gain: c.gain, torque_deadband_n: c.torque_deadband_n, ..d.cueing },
        safety: SafetyConfig { force_limit_n: c.force_limit_n, jerk_limit_n_per_s: c.jerk_limit_n_per_s, fade_s: c.fade_s },
        plant: PlantConfig {
            head_mass_kg: c.head_mass_kg,
            neck_stiffness_n_per_m: c.neck_stiffness_n_per_m,
            neck_damping_n_s_per_m: c.neck_damping_n_s_per_m,
            ..d.plant
        },
        ..d
    })
}

fn c_path(path: *const c_char) -> Result<String, KinhmdStatus> {
    if path.is_null() {
        return Err(fail(KinhmdStatus::NullPointer, "path is null"));
    }
    unsafe { CStr::from_ptr(path) }.to_str().map(str::to_owned).map_err(|_| fail(KinhmdStatus::InvalidArgument, "path is not valid UTF-8"))
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length plus
/// one, or 0 when there is no message. Pass a null `buf` to query the size.
#[no_mangle]
pub unsafe extern "C" fn kinhmd_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kinhmd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub unsafe extern "C" fn kinhmd_config_default(out: *mut KinhmdConfig) -> KinhmdStatus {
    guard(|| {
        let out = deref_mut!(out, "out");
        let d = SessionConfig::default();
        *out = KinhmdConfig {
            tick_rate_hz: d.tick_rate_hz,
            cueing_mode: mode_code(d.cueing.mode),
            gain: d.cueing.gain,
            torque_deadband_n: d.cueing.torque_deadband_n,
            force_limit_n: d.safety.force_limit_n,
            jerk_limit_n_per_s: d.safety.jerk_limit_n_per_s,
            fade_s: d.safety.fade_s,
            head_mass_kg: d.plant.head_mass_kg,
            neck_stiffness_n_per_m: d.plant.neck_stiffness_n_per_m,
            neck_damping_n_s_per_m: d.plant.neck_damping_n_s_per_m,
        };
        KinhmdStatus::Ok
    })
}

fn new_engine(cfg: &SessionConfig, out: &mut *mut KinhmdEngine) -> KinhmdStatus {
    match ControlLoop::new(cfg) {
        Ok(ctl) => {
            *out = Box::into_raw(Box::new(KinhmdEngine { ctl }));
            KinhmdStatus::Ok
        }
        Err(e) => fail(session_status(&e), e.to_string()),
    }
}

/// Creates an engine in the DISARMED state. `*out` is left untouched on failure.
#[no_mangle]
pub unsafe extern "C" fn kinhmd_engine_new(cfg: *const KinhmdConfig, out: *mut *mut KinhmdEngine) -> KinhmdStatus {
    guard(|| {
        let c = deref!(cfg, "cfg");
        let out = deref_mut!(out, "out");
        match session_config(c) {
            Ok(cfg) => new_engine(&cfg, out),
            Err(msg) => fail(KinhmdStatus::InvalidConfig, msg),
        }
    })
}

/// Creates an engine from a TOML configuration file.
#[no_mangle]
pub unsafe extern "C" fn kinhmd_engine_from_toml(path: *const c_char, out: *mut *mut KinhmdEngine) -> KinhmdStatus {
    guard(|| {
        let out = deref_mut!(out, "out");
        let path = match c_path(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match SessionConfig::load(&path) {
            Ok(cfg) => new_engine(&cfg, out),
            Err(e) => fail(session_status(&e), e.to_string()),
        }
    })
}

/// Frees an engine. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn kinhmd_engine_free(engine: *mut KinhmdEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Feeds one kill-switch event (`KINHMD_EVENT_*`). Events that do not apply
/// in the current state are ignored; read the state back to check.
#[no_mangle]
pub unsafe extern "C" fn kinhmd_engine_event(engine: *mut KinhmdEngine, event: u32) -> KinhmdStatus {
    guard(|| {
        let e = deref_mut!(engine, "engine");
        match event_from(event) {
            Some(ev) => {
                e.ctl.handle_event(ev);
                KinhmdStatus::Ok
            }
            None => fail(KinhmdStatus::InvalidArgument, format!("unknown event {event}")),
        }
    })
}

/// Writes the kill-switch state (`KINHMD_STATE_*`).
#[no_mangle]
pub unsafe extern "C" fn kinhmd_engine_state(engine: *const KinhmdEngine, out: *mut u32) -> KinhmdStatus {
    guard(|| {
        let e = deref!(engine, "engine");
        *deref_mut!(out, "out") = state_code(e.ctl.safety_state());
        KinhmdStatus::Ok
    })
}

/// Sets the gain, clamped to what the force limit allows. The gain actually
/// applied is written to `applied` when it is not null.
#[no_mangle]
pub unsafe extern "C" fn kinhmd_engine_set_gain(engine: *mut KinhmdEngine, gain: f64, applied: *mut f64) -> KinhmdStatus {
    guard(|| {
        let e = deref_mut!(engine, "engine");
        if !(gain.is_finite() && gain >= 0.0) {
            return fail(KinhmdStatus::InvalidArgument, format!("gain must be finite and >= 0, got {gain}"));
        }
        let g = e.ctl.set_gain(gain);
        if let Some(a) = applied.as_mut() {
            *a = g;
        }
        KinhmdStatus::Ok
    })
}

#[no_mangle]
pub unsafe extern "C" fn kinhmd_engine_set_mode(engine: *mut KinhmdEngine, mode: u32) -> KinhmdStatus {
    guard(|| {
        let e = deref_mut!(engine, "engine");
        match mode_from(mode) {
            Some(m) => {
                e.ctl.set_mode(m);
                KinhmdStatus::Ok
            }
            None => fail(KinhmdStatus::InvalidArgument, format!("unknown cueing mode {mode}")),
        }
    })
}

/// Runs one control tick with vehicle acceleration `accel` (m/s²).
/// `feed_live` = 0 makes the safety chain fade the force out. On
/// `KINHMD_STATUS_HARD_FAULT` the engine has latched its kill switch.
#[no_mangle]
pub unsafe extern "C" fn kinhmd_engine_tick(
    engine: *mut KinhmdEngine,
    accel: KinhmdVec3,
    feed_live: bool,
    out: *mut KinhmdWrench,
) -> KinhmdStatus {
    guard(|| {
        let e = deref_mut!(engine, "engine");
        let out = deref_mut!(out, "out");
        let sample = AccelerationSample::new(e.ctl.now(), accel.into());
        match e.ctl.tick(&sample, feed_live) {
            Ok(cmd) => {
                let (torque_mode, axis) = match cmd.torque_mode {
                    TorqueMode::Free => (KINHMD_TORQUE_FREE, KinhmdVec3::default()),
                    TorqueMode::CylinderJoint { axis } => (KINHMD_TORQUE_CYLINDER, axis.into()),
                };
                *out = KinhmdWrench { force: cmd.force.into(), torque_mode, axis, timestamp: cmd.timestamp };
                KinhmdStatus::Ok
            }
            Err(err) => fail(session_status(&err), err.to_string()),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn kinhmd_engine_head(engine: *const KinhmdEngine, out: *mut KinhmdHead) -> KinhmdStatus {
    guard(|| {
        let e = deref!(engine, "engine");
        let out = deref_mut!(out, "out");
        let h = e.ctl.head();
        let q = h.orientation.coords;
        *out = KinhmdHead {
            position: h.position.into(),
            velocity: h.velocity.into(),
            orientation: [q.x, q.y, q.z, q.w],
            angular_velocity: h.angular_velocity.into(),
        };
        KinhmdStatus::Ok
    })
}

/// Simulated time of the next tick, s. Returns NaN for a null engine.
#[no_mangle]
pub unsafe extern "C" fn kinhmd_engine_time(engine: *const KinhmdEngine) -> f64 {
    engine.as_ref().map_or(f64::NAN, |e| e.ctl.now())
}

/// Writes the tick log to `path` (JSON lines, gzip when the name ends in `.gz`).
#[no_mangle]
pub unsafe extern "C" fn kinhmd_engine_export_log(engine: *const KinhmdEngine, path: *const c_char) -> KinhmdStatus {
    guard(|| {
        let e = deref!(engine, "engine");
        let path = match c_path(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match e.ctl.log().export(&path) {
            Ok(()) => KinhmdStatus::Ok,
            Err(err) => fail(KinhmdStatus::Io, err.to_string()),
        }
    })
}

/// A latch bound to `engine`, usable from another thread. It stays valid
/// after the engine is freed (triggering it then has no effect).
#[no_mangle]
pub unsafe extern "C" fn kinhmd_engine_kill_latch(engine: *const KinhmdEngine, out: *mut *mut KinhmdKillLatch) -> KinhmdStatus {
    guard(|| {
        let e = deref!(engine, "engine");
        *deref_mut!(out, "out") = Box::into_raw(Box::new(KinhmdKillLatch { latch: e.ctl.kill_latch() }));
        KinhmdStatus::Ok
    })
}

/// Requests a kill; the engine outputs zero force from its next tick on.
#[no_mangle]
pub unsafe extern "C" fn kinhmd_kill_latch_trigger(latch: *const KinhmdKillLatch) -> KinhmdStatus {
    guard(|| {
        deref!(latch, "latch").latch.trigger();
        KinhmdStatus::Ok
    })
}

#[no_mangle]
pub unsafe extern "C" fn kinhmd_kill_latch_free(latch: *mut KinhmdKillLatch) {
    if !latch.is_null() {
        drop(Box::from_raw(latch));
    }
}

#[no_mangle]
pub unsafe extern "C" fn kinhmd_stimulus_default(out: *mut KinhmdStimulus) -> KinhmdStatus {
    guard(|| {
        let p = StimulusPattern::default();
        *deref_mut!(out, "out") =
            KinhmdStimulus { step_amplitude: p.step_amplitude, plateau_duration: p.plateau_duration, ease_duration: p.ease_duration };
        KinhmdStatus::Ok
    })
}

/// Pattern acceleration at `t` (0 ≤ t ≤ total duration), m/s².
#[no_mangle]
pub unsafe extern "C" fn kinhmd_stimulus_eval(pattern: *const KinhmdStimulus, t: f64, out: *mut f64) -> KinhmdStatus {
    guard(|| {
        let p = deref!(pattern, "pattern");
        let out = deref_mut!(out, "out");
        let p = StimulusPattern { step_amplitude: p.step_amplitude, plateau_duration: p.plateau_duration, ease_duration: p.ease_duration };
        match eval_pattern(&p, t) {
            Ok(a) => {
                *out = a;
                KinhmdStatus::Ok
            }
            Err(e) => fail(KinhmdStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Parses a DATA datagram. `*out` is left untouched on failure.
#[no_mangle]
pub unsafe extern "C" fn kinhmd_packet_parse(bytes: *const u8, len: usize, out: *mut *mut KinhmdPacket) -> KinhmdStatus {
    guard(|| {
        let out = deref_mut!(out, "out");
        let data = if len == 0 {
            &[][..]
        } else if bytes.is_null() {
            return fail(KinhmdStatus::NullPointer, "bytes is null");
        } else {
            std::slice::from_raw_parts(bytes, len)
        };
        match parse_packet(data) {
            Ok(packet) => {
                *out = Box::into_raw(Box::new(KinhmdPacket { packet }));
                KinhmdStatus::Ok
            }
            Err(e) => fail(KinhmdStatus::ParseError, e.to_string()),
        }
    })
}

/// Number of records, 0 for a null packet.
#[no_mangle]
pub unsafe extern "C" fn kinhmd_packet_record_count(packet: *const KinhmdPacket) -> usize {
    packet.as_ref().map_or(0, |p| p.packet.records.len())
}

#[no_mangle]
pub unsafe extern "C" fn kinhmd_packet_record(packet: *const KinhmdPacket, i: usize, out: *mut KinhmdDataRecord) -> KinhmdStatus {
    guard(|| {
        let p = deref!(packet, "packet");
        let out = deref_mut!(out, "out");
        match p.packet.records.get(i) {
            Some(r) => {
                *out = KinhmdDataRecord { index: r.index, values: r.values };
                KinhmdStatus::Ok
            }
            None => fail(KinhmdStatus::InvalidArgument, format!("record {i} out of range ({})", p.packet.records.len())),
        }
    })
}

/// Acceleration from record `record_index`, taking the three components from
/// value slots `slots[0..3]` and multiplying by `scale`. Returns
/// `KINHMD_STATUS_NO_SAMPLE` when the record is absent or not finite.
#[no_mangle]
pub unsafe extern "C" fn kinhmd_packet_extract(
    packet: *const KinhmdPacket,
    record_index: u32,
    slots: *const u8,
    scale: f64,
    out: *mut KinhmdVec3,
) -> KinhmdStatus {
    guard(|| {
        let p = deref!(packet, "packet");
        let out = deref_mut!(out, "out");
        if slots.is_null() {
            return fail(KinhmdStatus::NullPointer, "slots is null");
        }
        let s = std::slice::from_raw_parts(slots, 3);
        let map = match ChannelMap::new(record_index, [s[0], s[1], s[2]], scale) {
            Ok(m) => m,
            Err(e) => return fail(KinhmdStatus::InvalidArgument, e.to_string()),
        };
        match extract_sample(&p.packet, &map, 0.0) {
            Some(sample) => {
                *out = sample.accel.into();
                KinhmdStatus::Ok
            }
            None => fail(KinhmdStatus::NoSample, format!("no finite record {record_index} in packet")),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn kinhmd_packet_free(packet: *mut KinhmdPacket) {
    if !packet.is_null() {
        drop(Box::from_raw(packet));
    }
}
