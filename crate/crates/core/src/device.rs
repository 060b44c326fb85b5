//! Device abstraction and the simulated head/neck plant.
//!
//! The plant stands in for the grounded arm plus the wearer: a head mass on a
//! linear spring-damper neck inside a box-shaped workspace with hard stops.
//! Rotation is a second spring-damper on the head orientation. A force applied
//! at the headset connector also twists the head through `lever_arm_m`; the
//! cylinder-joint torque mode cancels that twist about the two axes orthogonal
//! to the force.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::{Quaternion, UnitQuaternion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cueing::{TorqueMode, WrenchCommand};
use crate::{is_finite_vec, Vec3};

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("invalid plant config: {0}")]
    InvalidConfig(&'static str),
    #[error("non-finite plant state")]
    NonFinite,
    #[error("device is in fault state")]
    Faulted,
    #[error("log timestamps must increase strictly ({prev} then {next})")]
    NonMonotonic { prev: f64, next: f64 },
    #[error("no log records in window")]
    EmptyWindow,
    #[error("log line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadState {
    /// Relative to the workspace center, m.
    pub position: Vec3,
    pub velocity: Vec3,
    pub orientation: UnitQuaternion<f64>,
    pub angular_velocity: Vec3,
}

impl Default for HeadState {
    fn default() -> Self {
        Self { position: Vec3::zeros(), velocity: Vec3::zeros(), orientation: UnitQuaternion::identity(), angular_velocity: Vec3::zeros() }
    }
}

impl HeadState {
    fn is_finite(&self) -> bool {
        is_finite_vec(&self.position)
            && is_finite_vec(&self.velocity)
            && is_finite_vec(&self.angular_velocity)
            && self.orientation.coords.iter().all(|c| c.is_finite())
    }

    /// Rotation vector from the neutral orientation, rad.
    pub fn rotation_vector(&self) -> Vec3 {
        self.orientation.scaled_axis()
    }

    /// Orientation error magnitude about the two axes orthogonal to `axis`, rad.
    pub fn off_axis_error(&self, axis: &Vec3) -> f64 {
        let r = self.rotation_vector();
        (r - axis * axis.dot(&r)).norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantConfig {
    /// Head plus headset, kg.
    pub head_mass_kg: f64,
    pub neck_stiffness_n_per_m: f64,
    pub neck_damping_n_s_per_m: f64,
    /// Head moment of inertia about the neck pivot, kg·m².
    pub head_inertia_kg_m2: f64,
    pub rot_stiffness_nm_per_rad: f64,
    pub rot_damping_nm_s_per_rad: f64,
    /// Device-side orientation hold gains used in cylinder-joint mode.
    pub hold_stiffness_nm_per_rad: f64,
    pub hold_damping_nm_s_per_rad: f64,
    /// Connector position relative to the neck pivot, m.
    pub lever_arm_m: Vec3,
    /// Half-extents of the reachable box. The arm's depth is read as 0.5 m.
    pub workspace_halfextents_m: Vec3,
    pub integrator_dt_s: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        let mass = 5.5;
        let k = 300.0;
        let inertia = 0.05;
        let k_rot = 10.0;
        let k_hold = 200.0;
        Self {
            head_mass_kg: mass,
            neck_stiffness_n_per_m: k,
            neck_damping_n_s_per_m: 2.0 * (k * mass).sqrt(),
            head_inertia_kg_m2: inertia,
            rot_stiffness_nm_per_rad: k_rot,
            rot_damping_nm_s_per_rad: 2.0 * (k_rot * inertia).sqrt(),
            hold_stiffness_nm_per_rad: k_hold,
            hold_damping_nm_s_per_rad: 2.0 * ((k_rot + k_hold) * inertia).sqrt() - 2.0 * (k_rot * inertia).sqrt(),
            lever_arm_m: Vec3::new(0.08, 0.0, 0.10),
            workspace_halfextents_m: Vec3::new(0.65, 0.25, 0.5),
            integrator_dt_s: 1e-3,
        }
    }
}

impl PlantConfig {
    pub fn validate(&self) -> Result<(), DeviceError> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        let non_neg = |v: f64| v.is_finite() && v >= 0.0;
        if !pos(self.head_mass_kg) || !pos(self.head_inertia_kg_m2) {
            return Err(DeviceError::InvalidConfig("mass and inertia must be positive"));
        }
        if !pos(self.neck_stiffness_n_per_m) || !pos(self.neck_damping_n_s_per_m) {
            return Err(DeviceError::InvalidConfig("neck stiffness and damping must be positive"));
        }
        if !pos(self.rot_stiffness_nm_per_rad) || !pos(self.rot_damping_nm_s_per_rad) {
            return Err(DeviceError::InvalidConfig("rotational stiffness and damping must be positive"));
        }
        if !non_neg(self.hold_stiffness_nm_per_rad) || !non_neg(self.hold_damping_nm_s_per_rad) {
            return Err(DeviceError::InvalidConfig("hold gains must be non-negative"));
        }
        if !self.workspace_halfextents_m.iter().all(|&h| pos(h)) || !is_finite_vec(&self.lever_arm_m) {
            return Err(DeviceError::InvalidConfig("workspace half-extents must be positive"));
        }
        if !(pos(self.integrator_dt_s) && self.integrator_dt_s <= 1e-3) {
            return Err(DeviceError::InvalidConfig("integrator_dt_s must be in (0, 1 ms]"));
        }
        Ok(())
    }

    /// c / (2 sqrt(k m)). 1.0 is critical damping.
    pub fn damping_ratio(&self) -> f64 {
        self.neck_damping_n_s_per_m / (2.0 * (self.neck_stiffness_n_per_m * self.head_mass_kg).sqrt())
    }

    /// Kinetic plus potential energy, translational and rotational, J.
    pub fn mechanical_energy(&self, s: &HeadState) -> f64 {
        let r = s.rotation_vector();
        0.5 * self.head_mass_kg * s.velocity.norm_squared()
            + 0.5 * self.neck_stiffness_n_per_m * s.position.norm_squared()
            + 0.5 * self.head_inertia_kg_m2 * s.angular_velocity.norm_squared()
            + 0.5 * self.rot_stiffness_nm_per_rad * r.norm_squared()
    }
}

/// Semi-implicit Euler step of the head/neck plant under `cmd`.
pub fn plant_step(cfg: &PlantConfig, s: &HeadState, cmd: &WrenchCommand, dt: f64) -> Result<HeadState, DeviceError> {
    let force = cmd.force;

    let accel = (force - s.position * cfg.neck_stiffness_n_per_m - s.velocity * cfg.neck_damping_n_s_per_m) / cfg.head_mass_kg;
    let mut velocity = s.velocity + accel * dt;
    let mut position = s.position + velocity * dt;
    for i in 0..3 {
        let h = cfg.workspace_halfextents_m[i];
        if position[i].abs() > h {
            position[i] = h.copysign(position[i]);
            velocity[i] = 0.0;
        }
    }

    let rot = s.rotation_vector();
    let omega = s.angular_velocity;
    let lever = s.orientation * cfg.lever_arm_m;
    let mut torque = lever.cross(&force) - rot * cfg.rot_stiffness_nm_per_rad - omega * cfg.rot_damping_nm_s_per_rad;
    if let TorqueMode::CylinderJoint { axis } = cmd.torque_mode {
        let rot_off = rot - axis * axis.dot(&rot);
        let omega_off = omega - axis * axis.dot(&omega);
        torque -= rot_off * cfg.hold_stiffness_nm_per_rad + omega_off * cfg.hold_damping_nm_s_per_rad;
    }
    let angular_velocity = omega + torque * (dt / cfg.head_inertia_kg_m2);
    let orientation = UnitQuaternion::from_scaled_axis(angular_velocity * dt) * s.orientation;
    let orientation = UnitQuaternion::new_normalize(orientation.into_inner());

    let next = HeadState { position, velocity, orientation, angular_velocity };
    if next.is_finite() {
        Ok(next)
    } else {
        Err(DeviceError::NonFinite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub t: f64,
    pub commanded: WrenchCommand,
    pub applied: Vec3,
    pub head: HeadState,
}

/// One record per control tick, strictly increasing in time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeviceLog {
    records: Vec<LogRecord>,
}

/// Flat on-disk form of a log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub t: f64,
    pub fx: f64,
    pub fy: f64,
    pub fz: f64,
    pub tq_mode: String,
    pub px: f64,
    pub py: f64,
    pub pz: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub qw: f64,
}

impl From<&LogRecord> for ExportRecord {
    fn from(r: &LogRecord) -> Self {
        let q = r.head.orientation.quaternion();
        Self {
            t: r.t,
            fx: r.commanded.force.x,
            fy: r.commanded.force.y,
            fz: r.commanded.force.z,
            tq_mode: r.commanded.torque_mode.label().to_owned(),
            px: r.head.position.x,
            py: r.head.position.y,
            pz: r.head.position.z,
            qx: q.i,
            qy: q.j,
            qz: q.k,
            qw: q.w,
        }
    }
}

impl ExportRecord {
    pub fn force(&self) -> Vec3 {
        Vec3::new(self.fx, self.fy, self.fz)
    }

    pub fn position(&self) -> Vec3 {
        Vec3::new(self.px, self.py, self.pz)
    }

    pub fn orientation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::new_normalize(Quaternion::new(self.qw, self.qx, self.qy, self.qz))
    }

    /// Rebuilds the wrench. The cylinder axis is the force direction.
    pub fn command(&self) -> WrenchCommand {
        let force = self.force();
        let torque_mode = match self.tq_mode.as_str() {
            "cylinder" if force.norm() > 0.0 => TorqueMode::CylinderJoint { axis: force.normalize() },
            _ => TorqueMode::Free,
        };
        WrenchCommand { force, torque_mode, timestamp: self.t }
    }
}

impl DeviceLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, rec: LogRecord) -> Result<(), DeviceError> {
        if let Some(last) = self.records.last() {
            if rec.t <= last.t {
                return Err(DeviceError::NonMonotonic { prev: last.t, next: rec.t });
            }
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&LogRecord> {
        self.records.last()
    }

    /// Records with `t0 <= t <= t1`.
    pub fn window(&self, t0: f64, t1: f64) -> &[LogRecord] {
        let lo = self.records.partition_point(|r| r.t < t0);
        let hi = self.records.partition_point(|r| r.t <= t1);
        &self.records[lo..hi.max(lo)]
    }

    pub fn extend_from(&mut self, other: &DeviceLog) -> Result<(), DeviceError> {
        for r in &other.records {
            self.push(*r)?;
        }
        Ok(())
    }

    /// Line-delimited JSON, one object per tick. Paths ending in `.gz` are gzipped.
    pub fn export(&self, path: impl AsRef<Path>) -> Result<(), DeviceError> {
        let path = path.as_ref();
        let file = File::create(path)?;
        if is_gz(path) {
            let mut w = GzEncoder::new(BufWriter::new(file), Compression::default());
            self.write_jsonl(&mut w)?;
            w.finish()?.flush()?;
        } else {
            let mut w = BufWriter::new(file);
            self.write_jsonl(&mut w)?;
            w.flush()?;
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> Result<(), DeviceError> {
        for r in &self.records {
            serde_json::to_writer(&mut *w, &ExportRecord::from(r)).map_err(io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Reads an exported log back in its flat form.
pub fn read_export(path: impl AsRef<Path>) -> Result<Vec<ExportRecord>, DeviceError> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let reader: Box<dyn Read> = if is_gz(path) { Box::new(GzDecoder::new(file)) } else { Box::new(file) };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExportRecord = serde_json::from_str(&line).map_err(|e| DeviceError::Parse { line: i + 1, reason: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

/// Peak Euclidean head displacement over a set of records.
pub fn lean_amplitude(records: &[LogRecord]) -> Result<f64, DeviceError> {
    if records.is_empty() {
        return Err(DeviceError::EmptyWindow);
    }
    Ok(records.iter().map(|r| r.head.position.norm()).fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ack {
    pub timestamp: f64,
}

/// Seam between the control loop and whatever produces the wrench.
pub trait Device {
    /// Queues `cmd` for the next plant step.
    fn send(&mut self, cmd: WrenchCommand) -> Result<Ack, DeviceError>;
    /// Advances the device by `dt` under the last accepted command.
    fn step(&mut self, dt: f64) -> Result<HeadState, DeviceError>;
    fn head(&self) -> HeadState;
    fn is_faulted(&self) -> bool;
}

/// Plant-backed device that logs every step.
#[derive(Debug, Clone)]
pub struct SimulatedDevice {
    cfg: PlantConfig,
    state: HeadState,
    pending: WrenchCommand,
    faulted: bool,
    log: DeviceLog,
}

impl SimulatedDevice {
    pub fn new(cfg: PlantConfig) -> Result<Self, DeviceError> {
        cfg.validate()?;
        Ok(Self { cfg, state: HeadState::default(), pending: WrenchCommand::zero(0.0), faulted: false, log: DeviceLog::new() })
    }

    pub fn config(&self) -> &PlantConfig {
        &self.cfg
    }

    pub fn log(&self) -> &DeviceLog {
        &self.log
    }

    pub fn take_log(&mut self) -> DeviceLog {
        std::mem::take(&mut self.log)
    }

    pub fn set_state(&mut self, state: HeadState) {
        self.state = state;
    }

    pub fn inject_fault(&mut self) {
        self.faulted = true;
    }

    pub fn clear_fault(&mut self) {
        self.faulted = false;
    }
}

impl Device for SimulatedDevice {
    fn send(&mut self, cmd: WrenchCommand) -> Result<Ack, DeviceError> {
        if self.faulted {
            return Err(DeviceError::Faulted);
        }
        self.pending = cmd;
        Ok(Ack { timestamp: cmd.timestamp })
    }

    fn step(&mut self, dt: f64) -> Result<HeadState, DeviceError> {
        if self.faulted {
            return Err(DeviceError::Faulted);
        }
        // ticks longer than the integrator step are split into equal substeps
        let substeps = (dt / self.cfg.integrator_dt_s - 1e-9).ceil().max(1.0) as usize;
        let h = dt / substeps as f64;
        let mut next = self.state;
        for _ in 0..substeps {
            next = match plant_step(&self.cfg, &next, &self.pending, h) {
                Ok(s) => s,
                Err(e) => {
                    self.faulted = true;
                    return Err(e);
                }
            };
        }
        self.state = next;
        self.log.push(LogRecord { t: self.pending.timestamp, commanded: self.pending, applied: self.pending.force, head: next })?;
        Ok(next)
    }

    fn head(&self) -> HeadState {
        self.state
    }

    fn is_faulted(&self) -> bool {
        self.faulted
    }
}
