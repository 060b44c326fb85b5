use kinhmd::cueing::{render_force, washout_step, CueingConfig, CueingMode, CueingPipeline, WashoutConfig, WashoutState};
use kinhmd::device::HeadState;
use kinhmd::safety::{KillEvent, SafetyConfig, SafetySupervisor};
use kinhmd::stimulus::AccelerationSample;
use kinhmd::Vec3;
use proptest::prelude::*;

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn cfg(mode: CueingMode, gain: f64) -> CueingConfig {
    CueingConfig { mode, gain, ..Default::default() }
}

fn engaged() -> SafetySupervisor {
    let mut s = SafetySupervisor::new(SafetyConfig::default()).unwrap();
    s.handle_event(KillEvent::Arm, 0.0);
    s.handle_event(KillEvent::Engage, 0.0);
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn mode_antisymmetry(a in vec3(1e3), g in 0.0f64..10.0) {
        let s = AccelerationSample::new(0.0, a);
        prop_assert_eq!(render_force(&cfg(CueingMode::Direct, g), &s), -render_force(&cfg(CueingMode::Indirect, g), &s));
    }

    #[test]
    fn gain_linearity(a in vec3(1e3), g in 0.0f64..10.0, mode in prop::sample::select(vec![CueingMode::Direct, CueingMode::Indirect, CueingMode::None])) {
        let s = AccelerationSample::new(0.0, a);
        prop_assert_eq!(render_force(&cfg(mode, g), &s), render_force(&cfg(mode, 1.0), &s) * g);
    }

    #[test]
    fn washout_never_exceeds_cap(
        stiffness in 0.0f64..500.0,
        cap in 0.0f64..2.0,
        delay in 0.0f64..2.0,
        steps in prop::collection::vec((vec3(0.7), vec3(0.3), 1e-4f64..0.05), 1..200),
    ) {
        let wc = WashoutConfig { enabled: true, recenter_stiffness_n_per_m: stiffness, recenter_force_cap_n: cap, activation_delay_s: delay, idle_accel_threshold: 0.1 };
        let mut st = WashoutState::default();
        for (pos, accel, dt) in steps {
            let head = HeadState { position: pos, ..Default::default() };
            let f = washout_step(&wc, &mut st, &head, &accel, dt);
            prop_assert!(f.norm() <= cap * (1.0 + 1e-12), "|washout| = {} > {cap}", f.norm());
            if accel.norm() >= 0.1 {
                prop_assert_eq!(f, Vec3::zeros());
            }
        }
    }

    #[test]
    fn pipeline_is_deterministic(inputs in prop::collection::vec(vec3(8.0), 1..300), washout in any::<bool>()) {
        let run = || {
            let mut c = CueingConfig::default();
            c.washout.enabled = washout;
            c.washout.activation_delay_s = 0.01;
            let mut p = CueingPipeline::new(c).unwrap();
            let mut s = engaged();
            let mut head = HeadState::default();
            inputs.iter().enumerate().map(|(i, a)| {
                let t = i as f64 * 1e-3;
                head.position = Vec3::new(0.01 * (i as f64).sin(), 0.0, 0.0);
                let cmd = p.tick(&AccelerationSample::new(t, *a * if i % 7 == 0 { 0.0 } else { 1.0 }), &head, &mut s, true, t, 1e-3);
                (cmd.force.map(f64::to_bits), cmd.torque_mode)
            }).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }

    /// Whatever the washout adds, the safety chain still caps the sum.
    #[test]
    fn washout_sum_is_capped(a in vec3(20.0), pos in vec3(0.6)) {
        let washout = WashoutConfig { enabled: true, activation_delay_s: 0.0, idle_accel_threshold: 1e3, ..Default::default() };
        let c = CueingConfig { washout, ..Default::default() };
        let mut p = CueingPipeline::new(c).unwrap();
        let mut s = engaged();
        let head = HeadState { position: pos, ..Default::default() };
        for i in 0..200 {
            let t = i as f64 * 1e-3;
            let cmd = p.tick(&AccelerationSample::new(t, a), &head, &mut s, true, t, 1e-3);
            prop_assert!(cmd.force.norm() <= 10.0);
        }
    }
}
