//! Head-based force-feedback motion cueing.
//!
//! The engine turns a stream of vehicle accelerations into force commands for a
//! grounded haptic arm attached to a head-mounted display. Everything runs
//! without hardware: the device is a simulated head/neck plant.
//!
//! Data flows through the crate in one direction per control tick:
//!
//! ```text
//! stimulus / telemetry -> cueing -> safety -> device -> log
//! ```
//!
//! [`session`] owns the fixed-rate loop that wires these stages together, the
//! trial sequencer, and the operator console service.

pub mod cueing;
pub mod device;
pub mod safety;
pub mod session;
pub mod stimulus;
pub mod telemetry;

/// Three-component vector in SI units. Axis convention: x forward, y lateral, z vertical.
pub type Vec3 = nalgebra::Vector3<f64>;

pub use cueing::{CueingConfig, CueingMode, CueingPipeline, TorqueMode, WashoutConfig, WrenchCommand};
pub use device::{DeviceLog, HeadState, PlantConfig, SimulatedDevice};
pub use safety::{KillEvent, KillState, KillSwitch, SafetyConfig, SafetySupervisor};
pub use session::{SessionConfig, TrialPlan, TrialRecord};
pub use stimulus::{AccelerationSample, StimulusPattern, Trace, TraceSource};

pub(crate) fn is_finite_vec(v: &Vec3) -> bool {
    v.iter().all(|c| c.is_finite())
}
