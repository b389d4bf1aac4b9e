use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
profile = "desk"
seed = 11

[settings]
forward_hidden = 4
inverse_hidden = 4
normalization_samples = 256
test_len = 300
fidelity_trajectories = 1
plant_ilc_enabled = true

[settings.campaign]
n_random = 2
n_sinusoid = 2
samples_per_traj = 200

[settings.forward_train]
max_iters = 20
log_every = 10

[settings.inverse_train]
max_iters = 20
log_every = 10

[settings.ilc]
max_iters = 2

[settings.plant_ilc]
max_iters = 1
"#;

fn flexcomp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flexcomp")).args(args).output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr_error(out: &Output) -> (String, String) {
    let v: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).lines().last().unwrap()).unwrap();
    (
        v["error"]["code"].as_str().unwrap().to_string(),
        v["error"]["message"].as_str().unwrap().to_string(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2_with_json() {
    for args in [&[][..], &["frobnicate"][..], &["collect", "--seed", "x"][..], &["report"][..]] {
        let out = flexcomp(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert_eq!(stderr_error(&out).0, "usage");
    }
}

#[test]
fn help_succeeds() {
    let out = flexcomp(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["collect", "train-forward", "train-inverse", "refine", "evaluate", "report", "serve", "replay"] {
        assert!(text.contains(cmd), "{cmd}");
    }
}

#[test]
fn runtime_errors_are_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let out = flexcomp(&["--out", s(dir.path()), "train-forward"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_error(&out).0, "missing_artifact");

    let out = flexcomp(&["report", "--input", s(&dir.path().join("nope.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_error(&out).0, "io");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "bogus = 1\n").unwrap();
    let out = flexcomp(&["--config", s(&bad), "collect"]);
    assert_eq!(stderr_error(&out).0, "config");

    let bad = dir.path().join("bad_settings.toml");
    std::fs::write(&bad, "[settings]\nwindow = \"fifty\"\n").unwrap();
    let out = flexcomp(&["--config", s(&bad), "collect"]);
    assert_eq!(stderr_error(&out).0, "config");

    let out = flexcomp(&["--out", s(dir.path()), "evaluate", "--experiment", "random"]);
    assert_eq!(stderr_error(&out).0, "missing_artifact");

    let out = flexcomp(&["--out", s(dir.path()), "replay", "--log", s(&dir.path().join("none.jsonl"))]);
    assert_eq!(stderr_error(&out).0, "missing_artifact");
}

#[test]
fn seed_precedence_cli_over_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "seed = 5\n").unwrap();
    let run = |extra: &[&str]| -> u64 {
        let out_dir = dir.path().join(format!("o{}", extra.len()));
        let mut args = vec!["--config", s(&cfg), "--out", s(&out_dir)];
        args.extend_from_slice(extra);
        args.extend_from_slice(&["evaluate", "--experiment", "teleop-replay", "--identity-feedforward"]);
        stdout_json(&flexcomp(&args));
        let text = std::fs::read_to_string(out_dir.join("teleop_replay/report.json")).unwrap();
        serde_json::from_str::<Value>(&text).unwrap()["seed"].as_u64().unwrap()
    };
    assert_eq!(run(&[]), 5);
    assert_eq!(run(&["--seed", "9"]), 9);
}

#[test]
fn synthetic_replay_writes_telemetry() {
    let dir = tempfile::tempdir().unwrap();
    let v = stdout_json(&flexcomp(&["--out", s(dir.path()), "replay", "--synthetic", "--ticks", "150"]));
    assert_eq!(v["ticks"], 150);
    let text = std::fs::read_to_string(dir.path().join("replay/telemetry.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 150);
    let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["type"], "state");
    // The generated log replays to the same telemetry.
    let log = dir.path().join("replay/commands.jsonl");
    let copy = dir.path().join("commands.jsonl");
    std::fs::copy(&log, &copy).unwrap();
    let again = dir.path().join("again");
    stdout_json(&flexcomp(&["--out", s(&again), "replay", "--log", s(&copy), "--ticks", "150"]));
    assert_eq!(std::fs::read_to_string(again.join("replay/telemetry.jsonl")).unwrap(), text);
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("out");
    let g = |rest: &[&str]| -> Value {
        let mut args = vec!["--config", s(&cfg), "--out", s(&out)];
        args.extend_from_slice(rest);
        stdout_json(&flexcomp(&args))
    };

    let v = g(&["collect"]);
    assert_eq!(v["trajectories"], 4);
    assert_eq!(v["seed"], 11);
    let v = g(&["train-forward"]);
    assert!(v["held_out_normalized_mse"].as_f64().unwrap().is_finite());
    g(&["train-inverse"]);
    for f in ["dataset.bin", "forward.ckpt", "inverse.ckpt", "forward_history.json", "inverse_history.json", "forward_fidelity.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }

    let v = g(&["refine", "--experiment", "random"]);
    let hist: Vec<f64> = serde_json::from_value(v["ilc"]["error_history"].clone()).unwrap();
    assert!(hist.windows(2).all(|w| w[1] <= w[0]));
    assert!(out.join("refine/random/u.csv").is_file());

    let v = g(&["evaluate", "--experiment", "sinusoid", "--experiment", "teleop-replay"]);
    assert!(v["sinusoid"]["mean_joint_improvement"]["brnn"].is_number());
    assert!(v["teleop_replay"]["mean_joint_improvement"]["comp_on"].is_number());
    let report_path = out.join("sinusoid/report.json");
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(
        report["controllers"],
        serde_json::json!(["baseline", "rnn_ilc", "brnn", "rnn_ilc_plant", "brnn_plant"])
    );
    for c in ["rnn_ilc_plant", "brnn_plant"] {
        let h: Vec<f64> = serde_json::from_value(report["ilc_history"][c].clone()).unwrap();
        assert!(h.windows(2).all(|w| w[1] <= w[0]), "{c}: {h:?}");
    }

    // Report re-emission, to stdout and to a file.
    let md = flexcomp(&["report", "--input", s(&report_path), "--format", "markdown"]);
    assert!(md.status.success());
    assert!(String::from_utf8_lossy(&md.stdout).contains("| Channel | Unit |"));
    let csv_path = dir.path().join("r.csv");
    g(&["report", "--input", s(&report_path), "--format", "csv", "--output", s(&csv_path)]);
    assert_eq!(
        std::fs::read_to_string(&csv_path).unwrap(),
        std::fs::read_to_string(out.join("sinusoid/report.csv")).unwrap()
    );

    // A dataset from another plant is refused.
    let plant = dir.path().join("plant.toml");
    let mut p = flexcomp_core::arm_sim::PlantConfig::default();
    p.spring_stiffness[0] = 60.0;
    std::fs::write(&plant, p.to_toml_string()).unwrap();
    let other = dir.path().join("other.toml");
    std::fs::write(&other, format!("plant_config = {:?}\n{TINY}", s(&plant))).unwrap();
    let res = flexcomp(&["--config", s(&other), "--out", s(&out), "train-forward"]);
    assert_eq!(stderr_error(&res).0, "config");
}
