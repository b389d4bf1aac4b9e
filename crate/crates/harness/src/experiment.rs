use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use flexcomp_core::arm_sim::PlantConfig;
use flexcomp_core::control::{filter_trajectory, run_closed_loop, ControlMode, ControllerConfig};
use flexcomp_core::ilc::{ilc_on_plant, ilc_refine, IlcState};
use flexcomp_core::neural::{load_checkpoint_file, Direction, RecurrentModel};
use flexcomp_core::Trajectory;
use flexcomp_teleop::{replay, CommandLog, ResolvedConfig, SessionConfig, TeleopMessage};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cartesian::{cartesian_square_reference, tool_positions};
use crate::error::{HarnessError, Result};
use crate::metrics::{compute_metrics, compute_metrics_matrix, Metrics};
use crate::pipeline::{held_out_reference, HeldOutKind};
use crate::profile::Settings;
use crate::report::{ExperimentKind, MetricTable, Report, ReportFormat, Series};

pub const BASELINE: &str = "baseline";
/// Forward model + model-based ILC feedforward + feedback.
pub const RNN_ILC: &str = "rnn_ilc";
/// Offline-filtered inverse-model feedforward + feedback.
pub const BRNN: &str = "brnn";
pub const RNN_ILC_PLANT: &str = "rnn_ilc_plant";
pub const BRNN_PLANT: &str = "brnn_plant";
pub const COMP_OFF: &str = "comp_off";
pub const COMP_ON: &str = "comp_on";

/// Default length of a generated teleoperation session.
pub const SYNTHETIC_LOG_TICKS: u64 = 3000;

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub experiment: ExperimentKind,
    pub plant: PlantConfig,
    pub settings: Settings,
    pub forward_checkpoint: Option<PathBuf>,
    pub inverse_checkpoint: Option<PathBuf>,
    /// Teleop replay only; a seeded synthetic session when absent.
    pub command_log: Option<PathBuf>,
    pub seed: u64,
    /// Index of the held-out reference within its family.
    pub reference_index: u64,
    /// Feed `q_d` itself as every approach's feedforward (control experiment).
    pub identity_feedforward: bool,
}

impl ExperimentSpec {
    pub fn new(experiment: ExperimentKind, plant: PlantConfig, settings: Settings, seed: u64) -> Self {
        Self {
            experiment,
            plant,
            settings,
            forward_checkpoint: None,
            inverse_checkpoint: None,
            command_log: None,
            seed,
            reference_index: 0,
            identity_feedforward: false,
        }
    }
}

/// Trained models an experiment may use.
#[derive(Debug, Clone, Default)]
pub struct Models {
    pub forward: Option<Arc<RecurrentModel>>,
    pub inverse: Option<Arc<RecurrentModel>>,
}

fn load_model(path: &Path, expect: Direction, what: &str) -> Result<Arc<RecurrentModel>> {
    if !path.is_file() {
        return Err(HarnessError::MissingArtifact {
            path: path.display().to_string(),
            what: format!("{what} checkpoint"),
        });
    }
    let model = load_checkpoint_file(path)?;
    if model.direction() != expect {
        return Err(HarnessError::Config(format!("{} is not a {what} checkpoint", path.display())));
    }
    Ok(Arc::new(model))
}

impl Models {
    pub fn load(forward: Option<&Path>, inverse: Option<&Path>) -> Result<Self> {
        Ok(Self {
            forward: forward
                .map(|p| load_model(p, Direction::Unidirectional, "forward-dynamics"))
                .transpose()?,
            inverse: inverse
                .map(|p| load_model(p, Direction::Bidirectional, "inverse-dynamics"))
                .transpose()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub report: Report,
    pub series: Vec<Series>,
}

impl ExperimentOutput {
    /// `report.{json,csv,md}` plus `series/*.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        for format in [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Markdown] {
            let path = dir.join(format!("report.{}", format.extension()));
            let mut file = std::fs::File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
            crate::report::emit_report(&self.report, format, &mut file)?;
        }
        crate::report::write_series(&dir.join("series"), &self.series)
    }
}

/// Loads the checkpoints named in `spec`, then runs it.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    let models = if spec.identity_feedforward {
        Models::default()
    } else {
        Models::load(spec.forward_checkpoint.as_deref(), spec.inverse_checkpoint.as_deref())?
    };
    run_with_models(spec, &models)
}

fn require<'a>(model: &'a Option<Arc<RecurrentModel>>, what: &str) -> Result<&'a RecurrentModel> {
    model.as_deref().ok_or_else(|| HarnessError::MissingArtifact {
        path: "<none>".into(),
        what: format!("{what} checkpoint"),
    })
}

pub fn run_with_models(spec: &ExperimentSpec, models: &Models) -> Result<ExperimentOutput> {
    match spec.experiment {
        ExperimentKind::Sinusoid => {
            let q_d = held_out_reference(&spec.plant, &spec.settings, HeldOutKind::Sinusoid, spec.reference_index)?;
            tracking_experiment(spec, models, q_d, None)
        }
        ExperimentKind::Random => {
            let q_d = held_out_reference(&spec.plant, &spec.settings, HeldOutKind::Random, spec.reference_index)?;
            tracking_experiment(spec, models, q_d, None)
        }
        ExperimentKind::CartesianSquare => {
            let square = cartesian_square_reference(&spec.plant, &spec.settings.square)?;
            let mut out = tracking_experiment(spec, models, square.q_d.clone(), Some(&square.xyz_ref))?;
            let s = &mut out.report.summary;
            s.insert("square.max_position_error".into(), square.max_position_error);
            s.insert("square.max_orientation_error".into(), square.max_orientation_error);
            Ok(out)
        }
        ExperimentKind::TeleopReplay => {
            let log = match &spec.command_log {
                Some(p) => {
                    if !p.is_file() {
                        return Err(HarnessError::MissingArtifact {
                            path: p.display().to_string(),
                            what: "command log".into(),
                        });
                    }
                    CommandLog::load(p)?
                }
                None => synthetic_command_log(spec.seed, SYNTHETIC_LOG_TICKS),
            };
            teleop_experiment(spec, models, &log)
        }
    }
}

fn joint_channels(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("j{i}")).collect()
}

fn ilc_summary(summary: &mut BTreeMap<String, f64>, key: &str, st: &IlcState) {
    summary.insert(format!("{key}.iterations"), st.iter as f64);
    summary.insert(format!("{key}.initial_error"), st.error_history[0]);
    summary.insert(format!("{key}.final_error"), st.error());
    summary.insert(format!("{key}.converged"), if st.converged { 1.0 } else { 0.0 });
}

fn feedback(settings: &Settings) -> ControllerConfig {
    ControllerConfig {
        mode: ControlMode::Feedforward,
        ..settings.controller.clone()
    }
}

fn baseline_controller(settings: &Settings) -> ControllerConfig {
    ControllerConfig {
        mode: ControlMode::Baseline,
        ..settings.controller.clone()
    }
}

/// Baseline, both approaches and (optionally) their plant-refined variants on one reference.
fn tracking_experiment(
    spec: &ExperimentSpec,
    models: &Models,
    q_d: Trajectory,
    xyz_ref: Option<&DMatrix<f64>>,
) -> Result<ExperimentOutput> {
    let plant = &spec.plant;
    let settings = &spec.settings;
    let mut summary = BTreeMap::new();
    let mut history = BTreeMap::new();
    let mut feedforwards: Vec<(String, Option<Trajectory>)> = vec![(BASELINE.into(), None)];

    if spec.identity_feedforward {
        feedforwards.push((RNN_ILC.into(), Some(q_d.clone())));
        feedforwards.push((BRNN.into(), Some(q_d.clone())));
    } else {
        let fwd = require(&models.forward, "forward-dynamics")?;
        let inv = require(&models.inverse, "inverse-dynamics")?;
        let (u, st) = ilc_refine(fwd, &q_d, &settings.ilc)?;
        ilc_summary(&mut summary, "ilc", &st);
        history.insert(RNN_ILC.to_string(), st.error_history.clone());
        let q_f = filter_trajectory(inv, &q_d)?;
        if settings.plant_ilc_enabled {
            let (u2, st2) = ilc_on_plant(plant, fwd, &q_d, &u, &settings.plant_ilc)?;
            ilc_summary(&mut summary, &format!("plant_ilc.{RNN_ILC_PLANT}"), &st2);
            history.insert(RNN_ILC_PLANT.to_string(), st2.error_history.clone());
            let (f2, st3) = ilc_on_plant(plant, fwd, &q_d, &q_f, &settings.plant_ilc)?;
            ilc_summary(&mut summary, &format!("plant_ilc.{BRNN_PLANT}"), &st3);
            history.insert(BRNN_PLANT.to_string(), st3.error_history.clone());
            feedforwards.push((RNN_ILC.into(), Some(u)));
            feedforwards.push((BRNN.into(), Some(q_f)));
            feedforwards.push((RNN_ILC_PLANT.into(), Some(u2)));
            feedforwards.push((BRNN_PLANT.into(), Some(f2)));
        } else {
            feedforwards.push((RNN_ILC.into(), Some(u)));
            feedforwards.push((BRNN.into(), Some(q_f)));
        }
    }

    let rate = q_d.sample_rate();
    let mut series = vec![Series {
        name: "q_d".into(),
        sample_rate: rate,
        data: q_d.data().clone(),
    }];
    let xyz_d = match xyz_ref {
        Some(xyz) => {
            series.push(Series {
                name: "xyz_ref".into(),
                sample_rate: rate,
                data: xyz.clone(),
            });
            Some(tool_positions(&plant.kinematic_params, &q_d)?)
        }
        None => None,
    };
    let mut joint = Vec::new();
    let mut tool = Vec::new();
    let mut controllers = Vec::new();
    for (name, ff) in &feedforwards {
        let ctrl = match ff {
            None => baseline_controller(settings),
            Some(_) => feedback(settings),
        };
        let run = run_closed_loop(plant, &q_d, ff.as_ref(), &ctrl)?;
        joint.push(compute_metrics(&run.q, &q_d)?);
        if let Some(xyz_d) = &xyz_d {
            let xyz = tool_positions(&plant.kinematic_params, &run.q)?;
            tool.push(compute_metrics_matrix(&xyz, xyz_d)?);
            series.push(Series {
                name: format!("xyz.{name}"),
                sample_rate: rate,
                data: xyz,
            });
        }
        if let Some(ff) = ff {
            series.push(Series {
                name: format!("q_f.{name}"),
                sample_rate: rate,
                data: ff.data().clone(),
            });
        }
        series.push(Series {
            name: format!("q.{name}"),
            sample_rate: rate,
            data: run.q.into_data(),
        });
        series.push(Series {
            name: format!("q_c.{name}"),
            sample_rate: rate,
            data: run.q_c.into_data(),
        });
        controllers.push(name.clone());
    }
    let mut tables = vec![MetricTable {
        name: "joint".into(),
        unit: "rad".into(),
        channels: joint_channels(q_d.n_joints()),
        metrics: joint,
    }];
    if xyz_d.is_some() {
        tables.push(MetricTable {
            name: "tool".into(),
            unit: "m".into(),
            channels: vec!["x".into(), "y".into(), "z".into()],
            metrics: tool,
        });
    }
    let mut report = Report {
        experiment: spec.experiment,
        seed: spec.seed,
        controllers,
        tables,
        summary,
        ilc_history: history,
    };
    report.summarize_improvements();
    Ok(ExperimentOutput { report, series })
}

/// A seeded stand-in for a joystick session, sent at 20 Hz. The operator
/// moves the hand around its start pose along a few sinusoids per axis and
/// sends their derivative; during pauses the stick is released and the
/// operator's clock stops, so the hand stays within a bounded region.
pub fn synthetic_command_log(seed: u64, ticks: u64) -> CommandLog {
    use std::f64::consts::TAU;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e1e_0b5e_55e5_5104);
    // Angular axes first (rad), then linear (m), as on the wire.
    let reach = [0.15, 0.15, 0.15, 0.08, 0.08, 0.08];
    let waves: Vec<Vec<(f64, f64, f64)>> = reach
        .iter()
        .map(|&r| {
            (0..2)
                .map(|_| {
                    let a = r / 2.0 * rng.random_range(0.5..1.0);
                    let f = rng.random_range(0.1..0.5);
                    let phi = rng.random_range(0.0..TAU);
                    (a, f, phi)
                })
                .collect()
        })
        .collect();
    let mut pauses = Vec::new();
    let mut t = 0u64;
    while t < ticks {
        t += rng.random_range(400..900);
        let len = rng.random_range(60..150);
        pauses.push((t, t + len));
        t += len;
    }
    let mut log = CommandLog::default();
    let mut seq = 0;
    let mut released = false;
    let mut clock = 0.0;
    for tick in (0..ticks).step_by(5) {
        let paused = pauses.iter().any(|&(a, b)| (a..b).contains(&tick));
        if paused && released {
            continue;
        }
        let mut v = [0.0; 6];
        if !paused {
            for (vi, w) in v.iter_mut().zip(&waves) {
                *vi = w.iter().map(|&(a, f, phi)| a * TAU * f * (TAU * f * clock + phi).cos()).sum();
            }
            clock += 0.05;
        }
        released = paused;
        seq += 1;
        log.push(tick, TeleopMessage::VelCmd { v, seq });
    }
    log
}

/// Replays one command log twice through the service pipeline, compensation
/// off and on, and compares tracking of the shared reference.
fn teleop_experiment(spec: &ExperimentSpec, models: &Models, log: &CommandLog) -> Result<ExperimentOutput> {
    let model = if spec.identity_feedforward {
        None
    } else {
        Some(Arc::new(require(&models.inverse, "inverse-dynamics")?.clone()))
    };
    let mut stripped = CommandLog::default();
    for e in &log.entries {
        if !matches!(e.message, TeleopMessage::ToggleComp { .. }) {
            stripped.push(e.tick, e.message.clone());
        }
    }
    let ticks = log.last_tick().map_or(0, |t| t + 1) + 100;
    let mut runs = Vec::new();
    for comp_on in [false, true] {
        let resolved = ResolvedConfig {
            plant: spec.plant.clone(),
            model: model.clone(),
            session: SessionConfig {
                controller: spec.settings.controller.clone(),
                comp_on: comp_on && model.is_some(),
                ..SessionConfig::default()
            },
        };
        runs.push(replay(&resolved, &stripped, ticks)?);
    }
    let n = spec.plant.n_joints;
    let to_matrix = |rows: &dyn Fn(usize) -> Vec<f64>| {
        let cols: Vec<f64> = (0..ticks as usize).flat_map(rows).collect();
        DMatrix::from_column_slice(n, ticks as usize, &cols)
    };
    let rate = spec.plant.sample_rate();
    let q_d = to_matrix(&|t| runs[0].states[t].q_d.clone());
    let mut series = vec![Series {
        name: "q_d".into(),
        sample_rate: rate,
        data: q_d.clone(),
    }];
    let mut metrics: Vec<Metrics> = Vec::new();
    let mut summary = BTreeMap::new();
    for (name, run) in [COMP_OFF, COMP_ON].iter().zip(&runs) {
        let reference = to_matrix(&|t| run.states[t].q_d.clone());
        if reference != q_d {
            return Err(HarnessError::Config("replays disagree on the reference".into()));
        }
        let q = to_matrix(&|t| run.states[t].q.clone());
        metrics.push(compute_metrics_matrix(&q, &q_d)?);
        series.push(Series {
            name: format!("q.{name}"),
            sample_rate: rate,
            data: q,
        });
        series.push(Series {
            name: format!("q_c.{name}"),
            sample_rate: rate,
            data: to_matrix(&|t| run.states[t].q_c.clone()),
        });
        summary.insert(format!("teleop.{name}.errors"), run.errors.len() as f64);
    }
    summary.insert("teleop.ticks".into(), ticks as f64);
    summary.insert(
        "teleop.latency_samples".into(),
        runs[1].states.last().map_or(0.0, |s| s.latency_samples as f64),
    );
    let mut report = Report {
        experiment: spec.experiment,
        seed: spec.seed,
        controllers: vec![COMP_OFF.into(), COMP_ON.into()],
        tables: vec![MetricTable {
            name: "joint".into(),
            unit: "rad".into(),
            channels: joint_channels(n),
            metrics,
        }],
        summary,
        ilc_history: BTreeMap::new(),
    };
    report.summarize_improvements();
    let improved = report
        .improvement("joint", COMP_ON)
        .unwrap_or_default()
        .iter()
        .filter(|&&p| p > 0.0)
        .count();
    report.summary.insert("teleop.joints_improved".into(), improved as f64);
    Ok(ExperimentOutput { report, series })
}

