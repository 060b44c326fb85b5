//! Plant checks against reference ODE solutions computed here.

use std::f64::consts::PI;

use kinhmd::cueing::{torque_policy, TorqueMode, WrenchCommand};
use kinhmd::device::{lean_amplitude, plant_step, Device, HeadState, PlantConfig, SimulatedDevice};
use kinhmd::session::{run_loop, SessionConfig};
use kinhmd::{CueingMode, Vec3};
use proptest::prelude::*;

/// Raised-cosine double step, written out independently.
fn pattern(t: f64, a: f64, plateau: f64, tau: f64) -> f64 {
    let step = 2.0 * tau + plateau;
    let one = |s: f64| {
        if !(0.0..=step).contains(&s) {
            0.0
        } else if s < tau {
            a * 0.5 * (1.0 - (PI * s / tau).cos())
        } else if s <= tau + plateau {
            a
        } else {
            a * 0.5 * (1.0 - (PI * (step - s) / tau).cos())
        }
    };
    if t < step {
        one(t)
    } else {
        -one(t - step)
    }
}

/// Classical RK4 on m x'' + c x' + k x = f(t). Returns (t, x) samples every `h`.
fn rk4(m: f64, c: f64, k: f64, f: impl Fn(f64) -> f64, h: f64, t_end: f64) -> Vec<(f64, f64)> {
    let deriv = |t: f64, x: f64, v: f64| (v, (f(t) - c * v - k * x) / m);
    let (mut x, mut v) = (0.0, 0.0);
    let n = (t_end / h).round() as usize;
    let mut out = Vec::with_capacity(n + 1);
    out.push((0.0, 0.0));
    for i in 0..n {
        let t = i as f64 * h;
        let (k1x, k1v) = deriv(t, x, v);
        let (k2x, k2v) = deriv(t + h / 2.0, x + h / 2.0 * k1x, v + h / 2.0 * k1v);
        let (k3x, k3v) = deriv(t + h / 2.0, x + h / 2.0 * k2x, v + h / 2.0 * k2v);
        let (k4x, k4v) = deriv(t + h, x + h * k3x, v + h * k3v);
        x += h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
        v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
        out.push(((i + 1) as f64 * h, x));
    }
    out
}

fn cmd(f: Vec3) -> WrenchCommand {
    WrenchCommand { force: f, torque_mode: torque_policy(&f, 1.0), timestamp: 0.0 }
}

/// Drives the plant along x with f(t) sampled at the start of each 1 ms tick.
fn plant_run(cfg: &PlantConfig, f: impl Fn(f64) -> f64, t_end: f64) -> Vec<f64> {
    let dt = cfg.integrator_dt_s;
    let n = (t_end / dt).round() as usize;
    let mut s = HeadState::default();
    (0..n)
        .map(|i| {
            s = plant_step(cfg, &s, &cmd(Vec3::new(f(i as f64 * dt), 0.0, 0.0)), dt).unwrap();
            s.position.x
        })
        .collect()
}

#[test]
fn zero_force_at_rest_stays_put() {
    let cfg = PlantConfig::default();
    let s0 = HeadState::default();
    let s1 = plant_step(&cfg, &s0, &WrenchCommand::zero(0.0), 1e-3).unwrap();
    assert_eq!(s1, s0);
}

#[test]
fn step_response_overshoot() {
    let cfg = PlantConfig::default();
    assert!(cfg.damping_ratio() >= 1.0);
    let (m, c, k) = (cfg.head_mass_kg, cfg.neck_damping_n_s_per_m, cfg.neck_stiffness_n_per_m);
    let f = 3.0;
    let x_final = f / k;
    let plant = plant_run(&cfg, |_| f, 5.0);
    let oracle = rk4(m, c, k, |_| f, 1e-4, 5.0);
    let plant_max = plant.iter().copied().fold(f64::MIN, f64::max);
    let oracle_max = oracle.iter().map(|p| p.1).fold(f64::MIN, f64::max);
    assert!(oracle_max <= x_final * 1.001, "oracle overshoot {}", oracle_max / x_final - 1.0);
    assert!(plant_max <= x_final * 1.001, "plant overshoot {}", plant_max / x_final - 1.0);
    // trajectories agree: the plant's x after tick i is the state at (i + 1) ms
    let worst = plant.iter().enumerate().map(|(i, x)| (x - oracle[(i + 1) * 10].1).abs()).fold(0.0, f64::max);
    assert!(worst < 0.01 * x_final, "max deviation from reference {worst}");
}

#[test]
fn indirect_lean_peak_matches_oracle() {
    let mut cfg = SessionConfig::default();
    cfg.cueing.mode = CueingMode::Indirect;
    let report = run_loop(&cfg, 10.0).unwrap();
    let lean = lean_amplitude(report.log.records()).unwrap();

    let p = &cfg.plant;
    let g = cfg.cueing.gain;
    // the default force never reaches the clamp or the slew limit, so F = -G a
    let force = |t: f64| -g * pattern(t, 5.0, 4.0, 0.5);
    let oracle = rk4(p.head_mass_kg, p.neck_damping_n_s_per_m, p.neck_stiffness_n_per_m, force, 1e-4, 10.0);
    let peak = oracle.iter().map(|s| s.1.abs()).fold(0.0, f64::max);
    let rel = (lean - peak).abs() / peak;
    assert!(rel < 0.05, "lean {lean} vs oracle {peak} ({:.2}%)", rel * 100.0);
}

#[test]
fn peak_lean_decreases_with_mass() {
    // a short pattern so the plant cannot settle within each step
    let force = |t: f64| -2.0 * pattern(t, 5.0, 0.3, 0.2);
    let mut last_plant = f64::INFINITY;
    let mut last_oracle = f64::INFINITY;
    for m in [2.0, 3.0, 4.0, 5.5, 8.0, 11.0, 16.0, 24.0] {
        let k: f64 = 300.0;
        let c = 2.0 * (k * m).sqrt();
        let cfg = PlantConfig { head_mass_kg: m, neck_damping_n_s_per_m: c, ..Default::default() };
        let plant = plant_run(&cfg, force, 2.0).into_iter().map(f64::abs).fold(0.0, f64::max);
        let oracle = rk4(m, c, k, force, 1e-4, 2.0).into_iter().map(|s| s.1.abs()).fold(0.0, f64::max);
        assert!(plant < last_plant, "mass {m}: plant peak {plant} not below {last_plant}");
        assert!(oracle < last_oracle, "mass {m}: oracle peak {oracle} not below {last_oracle}");
        assert!((plant - oracle).abs() / oracle < 0.05, "mass {m}: plant {plant} vs oracle {oracle}");
        last_plant = plant;
        last_oracle = oracle;
    }
}

#[test]
fn orientation_hold_in_cylinder_mode() {
    let mut cfg = SessionConfig::default();
    cfg.cueing.mode = CueingMode::Indirect;
    let report = run_loop(&cfg, 10.0).unwrap();
    let mut held_since: Option<f64> = None;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for r in report.log.records() {
        match r.commanded.torque_mode {
            TorqueMode::CylinderJoint { axis } => {
                let since = *held_since.get_or_insert(r.t);
                if r.t - since >= 0.5 {
                    let err = r.head.off_axis_error(&axis);
                    worst = worst.max(err);
                    assert!(err < 1f64.to_radians(), "off-axis error {:.3} deg at t={}", err.to_degrees(), r.t);
                    checked += 1;
                }
            }
            TorqueMode::Free => held_since = None,
        }
    }
    assert!(checked > 5000, "only {checked} held ticks checked");
    assert!(worst > 0.0, "lever torque should produce some deflection");
}

#[test]
fn hard_stops_zero_velocity() {
    let cfg = PlantConfig::default();
    let mut s = HeadState::default();
    for _ in 0..3000 {
        s = plant_step(&cfg, &s, &cmd(Vec3::new(1e4, -1e4, 0.0)), 1e-3).unwrap();
    }
    assert_eq!(s.position.x, cfg.workspace_halfextents_m.x);
    assert_eq!(s.position.y, -cfg.workspace_halfextents_m.y);
    assert_eq!(s.velocity.x, 0.0);
    assert_eq!(s.velocity.y, 0.0);
}

fn force_stream() -> impl Strategy<Value = Vec<Vec3>> {
    prop::collection::vec((-20.0f64..20.0, -20.0f64..20.0, -20.0f64..20.0).prop_map(|(x, y, z)| Vec3::new(x, y, z)), 1..400)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identical_commands_identical_logs(forces in force_stream()) {
        let run = || {
            let mut dev = SimulatedDevice::new(PlantConfig::default()).unwrap();
            for (i, f) in forces.iter().enumerate() {
                let mut c = cmd(*f);
                c.timestamp = i as f64 * 1e-3;
                dev.send(c).unwrap();
                dev.step(1e-3).unwrap();
            }
            dev.take_log()
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.len(), forces.len());
        for (x, y) in a.records().iter().zip(b.records()) {
            prop_assert_eq!(x.head.position.map(f64::to_bits), y.head.position.map(f64::to_bits));
            prop_assert_eq!(x.head.orientation.coords.map(f64::to_bits), y.head.orientation.coords.map(f64::to_bits));
        }
    }

    #[test]
    fn containment_and_unit_quaternion(forces in prop::collection::vec((-5e3f64..5e3, -5e3f64..5e3, -5e3f64..5e3), 1..300)) {
        let cfg = PlantConfig::default();
        let mut s = HeadState::default();
        for (x, y, z) in forces {
            for _ in 0..10 {
                s = plant_step(&cfg, &s, &cmd(Vec3::new(x, y, z)), 1e-3).unwrap();
                for i in 0..3 {
                    prop_assert!(s.position[i].abs() <= cfg.workspace_halfextents_m[i]);
                }
                prop_assert!((s.orientation.norm() - 1.0).abs() < 1e-6);
            }
        }
    }
}
