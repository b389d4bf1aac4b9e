use std::sync::Arc;
use std::time::Instant;

use flexcomp_core::arm_sim::PlantConfig;
use flexcomp_core::control::{filter_trajectory, run_closed_loop_with, SetpointPlant, SimulatedPlant};
use flexcomp_core::neural::{RecurrentModel, Topology};
use flexcomp_core::{JointVector, Trajectory};
use flexcomp_teleop::{replay, CommandLog, ResolvedConfig, Session, SessionConfig, StateMessage, TeleopMessage, NEUTRAL_POSE};
use nalgebra::{DMatrix, DVector};

fn small_brnn(hidden: usize, seed: u64) -> Arc<RecurrentModel> {
    let mut m = RecurrentModel::new(Topology::inverse_dynamics(7, hidden, 50), seed).unwrap();
    m.params.readout_w *= 0.01;
    m.params.readout_b.fill(0.0);
    Arc::new(m)
}

fn resolved(model: Option<Arc<RecurrentModel>>, comp_on: bool) -> ResolvedConfig {
    ResolvedConfig {
        plant: PlantConfig::default(),
        model,
        session: SessionConfig {
            comp_on,
            ..SessionConfig::default()
        },
    }
}

fn vel(v: [f64; 6], seq: u64) -> TeleopMessage {
    TeleopMessage::VelCmd { v, seq }
}

/// A few seconds of motion with a pause and a direction change.
fn demo_log() -> CommandLog {
    let mut log = CommandLog::default();
    log.push(0, vel([0.0, 0.0, 0.0, 0.05, 0.0, 0.02], 1));
    log.push(40, vel([0.0, 0.0, 0.1, 0.0, -0.04, 0.0], 2));
    log.push(90, vel([0.0; 6], 3));
    log.push(120, vel([0.05, 0.0, 0.0, -0.03, 0.03, -0.02], 4));
    log
}

fn column_traj(cols: Vec<Vec<f64>>) -> Trajectory {
    let n = cols[0].len();
    let len = cols.len();
    Trajectory::new(DMatrix::from_fn(n, len, |i, t| cols[t][i]), 100.0).unwrap()
}

#[test]
fn wire_format_is_tagged_json() {
    let m = vel([0.0, 0.0, 0.0, 0.1, 0.0, 0.0], 7);
    let text = m.to_json();
    assert!(text.contains("\"type\":\"vel_cmd\""), "{text}");
    assert_eq!(TeleopMessage::from_json(&text).unwrap(), m);

    let info = TeleopMessage::SessionInfo {
        n_joints: 7,
        rate_hz: 100.0,
        window_t: 50,
    };
    let v: serde_json::Value = serde_json::from_str(&info.to_json()).unwrap();
    assert_eq!(v["type"], "session_info");
    assert_eq!(v["window_T"], 50);

    let s = TeleopMessage::State(StateMessage {
        t: 0.01,
        q: vec![0.1 + 0.2, -1.0 / 3.0],
        q_d: vec![0.0; 2],
        q_c: vec![1e-300; 2],
        err_l2_window: std::f64::consts::PI,
        comp_on: true,
        latency_samples: 24,
    });
    assert_eq!(TeleopMessage::from_json(&s.to_json()).unwrap(), s);
    assert!(TeleopMessage::from_json("{\"type\":\"vel_cmd\",\"v\":[1,2]}").is_err());
    assert!(TeleopMessage::from_json("{\"type\":\"warp\"}").is_err());
}

#[test]
fn idle_session_holds_start_pose() {
    let mut s = Session::new(&resolved(None, false)).unwrap();
    let start = DVector::from_column_slice(&NEUTRAL_POSE);
    let mut last = Vec::new();
    for _ in 0..400 {
        let out = s.tick().unwrap();
        assert_eq!(out.state.q_d, NEUTRAL_POSE.to_vec());
        assert!(out.error.is_none());
        last = out.state.q;
    }
    // Gravity leaves a small static offset; the arm must have settled there.
    let q = DVector::from_vec(last.clone());
    assert!((&q - &start).amax() < 0.05, "{q}");
    let next = DVector::from_vec(s.tick().unwrap().state.q);
    assert!((next - q).amax() < 1e-6);
}

#[test]
fn zero_velocity_holds_setpoint() {
    let mut s = Session::new(&resolved(None, false)).unwrap();
    s.handle_message(&vel([0.0, 0.0, 0.0, 0.05, 0.0, 0.0], 1));
    for _ in 0..20 {
        s.tick().unwrap();
    }
    let moved = s.setpoint().clone();
    assert!((&moved - DVector::from_column_slice(&NEUTRAL_POSE)).amax() > 1e-4);
    assert!(s.handle_message(&vel([0.0; 6], 2)).is_none());
    for _ in 0..30 {
        let out = s.tick().unwrap();
        assert_eq!(out.state.q_d, moved.as_slice().to_vec());
    }
}

#[test]
fn out_of_order_seq_is_rejected_without_effect() {
    let cfg = resolved(None, false);
    let mut a = Session::new(&cfg).unwrap();
    let mut b = Session::new(&cfg).unwrap();
    for s in [&mut a, &mut b] {
        assert!(s.handle_message(&vel([0.0, 0.0, 0.0, 0.05, 0.0, 0.0], 5)).is_none());
        s.tick().unwrap();
    }
    for seq in [5, 3] {
        match a.handle_message(&vel([0.0, 0.0, 0.0, -0.2, 0.0, 0.0], seq)) {
            Some(TeleopMessage::Error { code, .. }) => assert_eq!(code, "out_of_order_seq"),
            other => panic!("expected rejection, got {other:?}"),
        }
    }
    for _ in 0..10 {
        assert_eq!(a.tick().unwrap(), b.tick().unwrap());
    }
    assert!(a.handle_message(&vel([0.0; 6], 6)).is_none());
}

#[test]
fn messages_without_model_or_from_server_are_rejected() {
    let mut s = Session::new(&resolved(None, true)).unwrap();
    assert!(!s.comp_on());
    let code = |m: Option<TeleopMessage>| match m {
        Some(TeleopMessage::Error { code, .. }) => code,
        other => panic!("expected an error, got {other:?}"),
    };
    assert_eq!(code(s.handle_message(&TeleopMessage::ToggleComp { on: true })), "no_model");
    assert!(s.handle_message(&TeleopMessage::ToggleComp { on: false }).is_none());
    assert_eq!(code(s.handle_message(&TeleopMessage::error("x", "y"))), "unexpected_message");
    assert_eq!(code(s.handle_message(&vel([f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0], 1))), "non_finite");
    assert_eq!(s.tick().unwrap().state.latency_samples, 0);
}

#[test]
fn stale_command_decays_monotonically_to_zero() {
    let mut s = Session::new(&resolved(None, false)).unwrap();
    s.handle_message(&vel([0.02, 0.0, 0.0, 0.05, -0.03, 0.01], 1));
    let norm = |v: [f64; 6]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let full = norm(s.effective_command());
    let mut prev = full;
    for tick in 0..150 {
        let now = norm(s.effective_command());
        assert!(now <= prev, "tick {tick}");
        if tick <= 50 {
            assert_eq!(now, full, "held for 500 ms");
        }
        if tick >= 100 {
            assert_eq!(now, 0.0);
        }
        prev = now;
        s.tick().unwrap();
    }
    // Halfway through the ramp the command is at half strength.
    let mut s = Session::new(&resolved(None, false)).unwrap();
    s.handle_message(&vel([0.0, 0.0, 0.0, 0.04, 0.0, 0.0], 1));
    for _ in 0..75 {
        s.tick().unwrap();
    }
    assert!((s.effective_command()[3] - 0.02).abs() < 1e-12);
    let held = s.setpoint().clone();
    for _ in 0..30 {
        s.tick().unwrap();
    }
    let after = s.setpoint().clone();
    for _ in 0..30 {
        s.tick().unwrap();
    }
    assert!((&after - &held).amax() > 0.0);
    assert_eq!(s.setpoint(), &after, "arm stops once the command has fully decayed");
}

#[test]
fn orientation_lock_keeps_setpoint_orientation() {
    let cfg = resolved(None, false);
    let kin = cfg.plant.kinematic_params.clone();
    let mut s = Session::new(&cfg).unwrap();
    s.handle_message(&TeleopMessage::SetOrientationLock { on: true });
    s.handle_message(&vel([0.3, -0.2, 0.1, 0.04, 0.03, -0.02], 1));
    let start = kin.forward_kinematics(&DVector::from_column_slice(&NEUTRAL_POSE)).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        s.tick().unwrap();
        let pose = kin.forward_kinematics(s.setpoint()).unwrap();
        worst = worst.max(pose.orientation_distance(&start));
    }
    let moved = kin.forward_kinematics(s.setpoint()).unwrap();
    assert!((moved.position - start.position).norm() > 0.01);
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn compensation_delays_reference_by_exactly_24_samples() {
    let log = demo_log();
    let plain = replay(&resolved(None, false), &log, 200).unwrap();
    let comp = replay(&resolved(Some(small_brnn(4, 3)), true), &log, 200).unwrap();
    for (s, st) in comp.states.iter().enumerate() {
        assert_eq!(st.latency_samples, 24);
        let src = s.saturating_sub(24);
        assert_eq!(st.q_d, plain.states[src].q_d, "tick {s}");
    }
    // Identical integration means the delayed stream is a pure shift.
    assert_ne!(comp.states[100].q_d, comp.states[76].q_d);
}

#[test]
fn session_matches_batch_closed_loop() {
    let log = demo_log();
    let ticks = 220;
    let model = small_brnn(4, 11);
    let plain = replay(&resolved(None, false), &log, ticks).unwrap();
    let q_d = column_traj(plain.states.iter().map(|s| s.q_d.clone()).collect());
    let delayed = column_traj((0..ticks as usize).map(|s| plain.states[s.saturating_sub(24)].q_d.clone()).collect());
    let filtered = filter_trajectory(&model, &q_d).unwrap();
    let ff = column_traj((0..ticks as usize).map(|s| filtered.sample(s.saturating_sub(24)).as_slice().to_vec()).collect());

    let cfg = resolved(Some(model.clone()), true);
    for (comp_on, q_f) in [(true, Some(&ff)), (false, None)] {
        let run = replay(
            &ResolvedConfig {
                session: SessionConfig {
                    comp_on,
                    ..cfg.session.clone()
                },
                ..cfg.clone()
            },
            &log,
            ticks,
        )
        .unwrap();
        let mut plant = SimulatedPlant::new(&cfg.plant).unwrap();
        plant.reset(&JointVector::from_column_slice(&NEUTRAL_POSE)).unwrap();
        let batch = run_closed_loop_with(&mut plant, &delayed, q_f, &cfg.session.controller).unwrap();
        for (s, st) in run.states.iter().enumerate() {
            assert_eq!(st.q_c, batch.q_c.sample(s).as_slice().to_vec(), "comp {comp_on} tick {s}");
            assert_eq!(st.q, batch.q.sample(s).as_slice().to_vec(), "comp {comp_on} tick {s}");
        }
    }
}

#[test]
fn toggling_compensation_switches_command_path() {
    let model = small_brnn(4, 5);
    let mut log = demo_log();
    log.entries.insert(1, flexcomp_teleop::LogEntry {
        tick: 10,
        message: TeleopMessage::ToggleComp { on: true },
    });
    let off = replay(&resolved(Some(model.clone()), false), &demo_log(), 150).unwrap();
    let toggled = replay(&resolved(Some(model), false), &log, 150).unwrap();
    // Before the stream primes (tick 49) both sessions use the same command.
    for (a, b) in off.states[..49].iter().zip(&toggled.states[..49]) {
        assert_eq!((&a.q, &a.q_d, &a.q_c), (&b.q, &b.q_d, &b.q_c));
    }
    assert!(toggled.states[20].comp_on);
    assert!(toggled.states[60].comp_on && !off.states[60].comp_on);
    assert_ne!(off.states[60].q_c, toggled.states[60].q_c);
}

#[test]
fn command_log_round_trip_and_validation() {
    let log = demo_log();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cmds.jsonl");
    log.save(&path).unwrap();
    assert_eq!(CommandLog::load(&path).unwrap(), log);
    assert_eq!(log.last_tick(), Some(120));

    let bad_order = "{\"tick\":5,\"message\":{\"type\":\"toggle_comp\",\"on\":false}}\n{\"tick\":2,\"message\":{\"type\":\"toggle_comp\",\"on\":true}}\n";
    assert!(CommandLog::read(bad_order.as_bytes()).is_err());
    let server_msg = "{\"tick\":0,\"message\":{\"type\":\"error\",\"code\":\"a\",\"detail\":\"b\"}}\n";
    assert!(CommandLog::read(server_msg.as_bytes()).is_err());
    assert!(CommandLog::read("not json\n".as_bytes()).is_err());
    assert_eq!(CommandLog::read("\n\n".as_bytes()).unwrap(), CommandLog::default());
}

#[test]
fn replay_is_deterministic_and_reports_rejections() {
    let mut log = demo_log();
    log.push(130, vel([0.0; 6], 2));
    let cfg = resolved(Some(small_brnn(4, 9)), true);
    let a = replay(&cfg, &log, 180).unwrap();
    let b = replay(&cfg, &log, 180).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.errors.len(), 1);
    assert_eq!(a.errors[0].0, 130);
}

#[test]
fn mean_tick_compute_fits_real_time_budget() {
    let cfg = resolved(Some(small_brnn(16, 1)), true);
    let mut s = Session::new(&cfg).unwrap();
    s.handle_message(&vel([0.0, 0.0, 0.05, 0.03, 0.02, -0.01], 1));
    let ticks = 300;
    let start = Instant::now();
    for _ in 0..ticks {
        s.tick().unwrap();
    }
    let mean_ms = start.elapsed().as_secs_f64() * 1e3 / ticks as f64;
    assert!(mean_ms < 10.0, "mean tick {mean_ms} ms");
}

#[test]
fn mismatched_configuration_is_refused() {
    let mut cfg = resolved(Some(small_brnn(4, 1)), false);
    assert!(cfg.check(100.0, 50).is_ok());
    assert!(cfg.check(50.0, 50).is_err());
    assert!(cfg.check(100.0, 40).is_err());
    cfg.session.start_pose = Some(vec![0.0; 3]);
    assert!(cfg.check(100.0, 50).is_err());
    let fwd = Arc::new(RecurrentModel::new(Topology::forward_dynamics(7, 4, 50), 0).unwrap());
    assert!(resolved(Some(fwd), false).check(100.0, 50).is_err());
}
