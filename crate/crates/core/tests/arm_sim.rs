use flexcomp_core::arm_sim::{simulate, KinematicParams, Plant, PlantConfig};
use flexcomp_core::Trajectory;
use flexcomp_oracles::{power_spectrum, two_mass_lti};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn single_joint(delay: usize) -> PlantConfig {
    let mut cfg = PlantConfig::uniform(1);
    cfg.gravity_gain = vec![0.0];
    cfg.delay_steps = delay;
    cfg
}

fn sinusoid_on(joint: usize, n: usize, len: usize, amp: f64, hz: f64) -> Trajectory {
    let data = DMatrix::from_fn(n, len, |i, t| {
        if i == joint {
            amp * (2.0 * std::f64::consts::PI * hz * t as f64 * 0.01).sin()
        } else {
            0.0
        }
    });
    Trajectory::new(data, 100.0).unwrap()
}

fn random_command(seed: u64, cfg: &PlantConfig, len: usize) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = DMatrix::from_fn(cfg.n_joints, len, |i, _| {
        let [lo, hi] = cfg.joint_limits[i];
        rng.random_range(lo * 0.5..hi * 0.5)
    });
    Trajectory::new(data, cfg.sample_rate()).unwrap()
}

#[test]
fn step_response_matches_state_space_oracle() {
    let cfg = single_joint(0);
    let lti = two_mass_lti(
        cfg.motor_inertia[0],
        cfg.link_inertia[0],
        cfg.spring_stiffness[0],
        cfg.spring_damping[0],
        cfg.servo_kp[0],
        cfg.servo_kd[0],
        cfg.dt,
        cfg.substeps,
    );
    let plant = Plant::new(cfg).unwrap();
    let mut state = plant.init(&DVector::zeros(1)).unwrap();
    let mut x = DVector::<f64>::zeros(4);
    let u = DVector::from_element(1, 1.0);
    for t in 0..400 {
        let q = plant.advance(&mut state, &u).unwrap();
        assert!((q[0] - x[2]).abs() < 1e-10, "step {t}: {} vs {}", q[0], x[2]);
        x = &lti.a * &x + &lti.b * 1.0;
    }
    // and the step response has settled near the command
    assert!((x[2] - 1.0).abs() < 1e-3);
}

#[test]
fn delayed_response_is_shifted_oracle() {
    let cfg = single_joint(3);
    let lti = two_mass_lti(0.01, 0.1, 50.0, 1.0, 100.0, 10.0, 0.01, cfg.substeps);
    let plant = Plant::new(cfg).unwrap();
    let mut state = plant.init(&DVector::zeros(1)).unwrap();
    let mut x = DVector::<f64>::zeros(4);
    let input = |t: usize| ((t as f64) * 0.07).sin();
    for t in 0..300 {
        let q = plant.advance(&mut state, &DVector::from_element(1, input(t))).unwrap();
        assert!((q[0] - x[2]).abs() < 1e-10);
        let applied = if t >= 3 { input(t - 3) } else { 0.0 };
        x = &lti.a * &x + &lti.b * applied;
    }
}

#[test]
fn coupled_joints_follow_joint_four_frequency() {
    let cfg = PlantConfig::default();
    let len = 1000;
    let hz = 0.5;
    let q = simulate(&cfg, &sinusoid_on(3, 7, len, 0.5, hz)).unwrap();
    let expected_bin = (hz * len as f64 * cfg.dt).round() as usize;
    for joint in [2usize, 4] {
        let row: Vec<f64> = q.data().row(joint).iter().copied().collect();
        assert!(row.iter().any(|v| v.abs() > 1e-4), "joint {joint} did not move");
        let spec = power_spectrum(&row);
        let peak = (1..spec.len())
            .max_by(|&a, &b| spec[a].total_cmp(&spec[b]))
            .unwrap();
        assert_eq!(peak, expected_bin, "joint {joint}");
    }
    // a joint two steps away is still driven through the chain
    assert!(q.data().row(1).iter().any(|v| v.abs() > 1e-7));
}

#[test]
fn simulate_equals_fold_of_step() {
    let cfg = PlantConfig::default();
    let q_c = random_command(11, &cfg, 300);
    let out = simulate(&cfg, &q_c).unwrap();
    let plant = Plant::new(cfg).unwrap();
    let mut state = plant.init(&q_c.sample(0)).unwrap();
    for t in 0..q_c.len() {
        let (next, q) = plant.step(&state, &q_c.sample(t)).unwrap();
        state = next;
        assert_eq!(q, out.sample(t));
    }
}

#[test]
fn strictly_proper_with_delay() {
    let cfg = PlantConfig::default();
    let base = random_command(5, &cfg, 200);
    let out = simulate(&cfg, &base).unwrap();
    let cut = 120;
    let mut data = base.data().clone();
    for t in cut..200 {
        for i in 0..7 {
            data[(i, t)] += 0.2;
        }
    }
    let perturbed = simulate(&cfg, &base.with_data(data).unwrap()).unwrap();
    // output at t depends on commands up to t - 1 - delay only
    let first_affected = cut + 1 + cfg.delay_steps;
    for t in 0..first_affected {
        assert_eq!(out.sample(t), perturbed.sample(t), "t = {t}");
    }
    assert_ne!(out.sample(first_affected), perturbed.sample(first_affected));
}

#[test]
fn bounded_over_long_horizon() {
    let cfg = PlantConfig::default();
    let plant = Plant::new(cfg.clone()).unwrap();
    let mut state = plant.init(&DVector::zeros(7)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cmd = DVector::zeros(7);
    let mut peak: f64 = 0.0;
    for t in 0..100_000 {
        if t % 50 == 0 {
            cmd = DVector::from_fn(7, |i, _| {
                let [lo, hi] = cfg.joint_limits[i];
                rng.random_range(lo..hi)
            });
        }
        let q = plant.advance(&mut state, &cmd).unwrap();
        peak = peak.max(q.amax());
    }
    assert!(peak < 5.0, "peak {peak}");
}

#[test]
fn free_response_decays() {
    let mut cfg = PlantConfig::default();
    cfg.gravity_gain = vec![0.0; 7];
    let plant = Plant::new(cfg).unwrap();
    let mut state = plant.init(&DVector::zeros(7)).unwrap();
    state.link_pos = DVector::from_element(7, 0.3);
    for _ in 0..1000 {
        plant.advance(&mut state, &DVector::zeros(7)).unwrap();
    }
    assert!(state.link_pos.amax() < 1e-6);
}

#[test]
fn zero_coupling_decouples_joints() {
    let mut cfg = PlantConfig::default();
    cfg.coupling = (0..7)
        .map(|i| (0..7).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let base = random_command(9, &cfg, 300);
    let out = simulate(&cfg, &base).unwrap();
    let mut data = base.data().clone();
    for t in 10..300 {
        data[(3, t)] += 0.3;
    }
    let pert = simulate(&cfg, &base.with_data(data).unwrap()).unwrap();
    for i in (0..7).filter(|&i| i != 3) {
        assert_eq!(out.data().row(i), pert.data().row(i));
    }
    assert_ne!(out.data().row(3), pert.data().row(3));
}

#[test]
fn paper_length_trajectory() {
    let cfg = PlantConfig::default();
    let q_c = random_command(1, &cfg, 2500);
    assert_eq!(simulate(&cfg, &q_c).unwrap().len(), 2500);
}

#[test]
fn parallel_equals_serial() {
    let cfg = PlantConfig::default();
    let inputs: Vec<Trajectory> = (0..4).map(|s| random_command(s, &cfg, 200)).collect();
    let serial: Vec<Trajectory> = inputs.iter().map(|q| simulate(&cfg, q).unwrap()).collect();
    let parallel: Vec<Trajectory> = std::thread::scope(|s| {
        let handles: Vec<_> = inputs.iter().map(|q| s.spawn(|| simulate(&cfg, q).unwrap())).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(serial, parallel);
}

#[test]
fn jacobian_matches_finite_differences() {
    let kin = KinematicParams::baxter_like();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let delta = 1e-6;
    for _ in 0..100 {
        let q = DVector::from_fn(7, |_, _| rng.random_range(-2.0..2.0));
        let jac = kin.jacobian(&q).unwrap();
        let p0 = kin.forward_kinematics(&q).unwrap();
        for i in 0..7 {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[i] += delta;
            qm[i] -= delta;
            let pp = kin.forward_kinematics(&qp).unwrap();
            let pm = kin.forward_kinematics(&qm).unwrap();
            let dp = (pp.position - pm.position) / (2.0 * delta);
            // angular velocity from the relative rotation, expressed in the base frame
            let dr = (pp.orientation * pm.orientation.inverse()).scaled_axis() / (2.0 * delta);
            for r in 0..3 {
                assert!((jac[(r, i)] - dr[r]).abs() < 1e-6, "angular row {r} joint {i}");
                assert!((jac[(r + 3, i)] - dp[r]).abs() < 1e-6, "linear row {r} joint {i}");
            }
        }
        assert!((p0.orientation.norm() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn planar_manipulability_closed_form() {
    let kin = KinematicParams::planar(&[1.0, 1.0]);
    for q2 in [0.3, 1.0, 2.0, -1.2] {
        let w = kin.position_manipulability(&DVector::from_vec(vec![0.7, q2])).unwrap();
        assert!((w - q2.sin().abs()).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn simulate_is_deterministic(seed in 0u64..1000) {
        let cfg = PlantConfig::default();
        let q_c = random_command(seed, &cfg, 80);
        prop_assert_eq!(simulate(&cfg, &q_c).unwrap(), simulate(&cfg, &q_c).unwrap());
    }

    #[test]
    fn manipulability_nonnegative(q in proptest::collection::vec(-3.0f64..3.0, 7)) {
        let kin = KinematicParams::baxter_like();
        let q = DVector::from_vec(q);
        let w = kin.manipulability(&q).unwrap();
        prop_assert!(w >= 0.0);
        let j = kin.jacobian(&q).unwrap();
        let det = (&j * j.transpose()).determinant();
        prop_assert!((w * w - det).abs() < 1e-9);
    }
}
