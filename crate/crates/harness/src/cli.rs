use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use flexcomp_core::arm_sim::PlantConfig;
use flexcomp_core::dataset::{load_dataset, save_dataset, Campaign};
use flexcomp_core::ilc::ilc_refine;
use flexcomp_core::neural::{save_checkpoint_file, TrainHistory};
use flexcomp_teleop::{replay, CommandLog, TeleopConfig, TeleopServer};
use serde_json::{json, Value};

use crate::error::{HarnessError, Result};
use crate::experiment::{run_experiment, synthetic_command_log, ExperimentSpec, Models, SYNTHETIC_LOG_TICKS};
use crate::pipeline::{collect, forward_fidelity, held_out_pairs, train_forward, train_inverse};
use crate::profile::{HarnessConfig, Profile, Settings};
use crate::report::{emit_report, write_series, ExperimentKind, Report, ReportFormat, Series};

#[derive(Debug, Parser)]
#[command(name = "flexcomp", version, about = "Learned feedforward compensation for a flexible-joint arm")]
pub struct Cli {
    /// TOML file with `profile`, `seed`, `plant_config` and `[settings]` overrides.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum)]
    pub profile: Option<Profile>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the excitation campaign against the plant and store the dataset.
    Collect,
    /// Train the forward-dynamics model.
    TrainForward(TrainArgs),
    /// Train the inverse-dynamics model.
    TrainInverse(TrainArgs),
    /// Model-based ILC feedforward for a held-out or Cartesian reference.
    Refine(RefineArgs),
    /// Run experiments and write reports and series.
    Evaluate(EvaluateArgs),
    /// Re-emit a JSON report in another format.
    Report(ReportArgs),
    /// Serve the teleoperation websocket until interrupted.
    Serve(ServeArgs),
    /// Replay a command log headlessly and write the telemetry.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Defaults to `<out>/dataset.bin`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long, value_enum, default_value = "sinusoid")]
    pub experiment: ExperimentKind,
    #[arg(long)]
    pub forward: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub index: u64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Repeatable; all four when omitted.
    #[arg(long, value_enum)]
    pub experiment: Vec<ExperimentKind>,
    #[arg(long)]
    pub forward: Option<PathBuf>,
    #[arg(long)]
    pub inverse: Option<PathBuf>,
    /// Recorded teleop session; a seeded synthetic one when omitted.
    #[arg(long)]
    pub command_log: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub index: u64,
    /// Use the reference itself as feedforward (expects 0 % improvement).
    #[arg(long)]
    pub identity_feedforward: bool,
    #[arg(long)]
    pub no_plant_ilc: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "markdown")]
    pub format: ReportFormat,
    /// Stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Teleop service TOML; defaults otherwise.
    #[arg(long)]
    pub teleop_config: Option<PathBuf>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub inverse: Option<PathBuf>,
    #[arg(long)]
    pub record_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// JSON-lines command log; `--synthetic` generates one instead.
    #[arg(long, required_unless_present = "synthetic")]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long)]
    pub teleop_config: Option<PathBuf>,
    #[arg(long)]
    pub inverse: Option<PathBuf>,
    #[arg(long)]
    pub comp_on: bool,
    /// Defaults to one second past the last logged command.
    #[arg(long)]
    pub ticks: Option<u64>,
}

/// Resolved global options.
pub struct Context {
    pub out: PathBuf,
    pub seed: u64,
    pub profile: Profile,
    pub plant: PlantConfig,
    pub settings: Settings,
    pub config: HarnessConfig,
}

impl Context {
    pub fn new(cli: &Cli) -> Result<Self> {
        let config = match &cli.config {
            Some(p) => HarnessConfig::load(p)?,
            None => HarnessConfig::default(),
        };
        let profile = cli.profile.or(config.profile).unwrap_or(Profile::Desk);
        let seed = cli.seed.or(config.seed).unwrap_or(0);
        let plant = config.plant()?;
        let mut settings = config.settings(profile)?.with_seed(seed);
        let n = plant.n_joints;
        if settings.campaign.n_joints() != n {
            return Err(HarnessError::Config(format!(
                "campaign describes {} joints, plant has {n}",
                settings.campaign.n_joints()
            )));
        }
        settings.campaign.sample_rate = plant.sample_rate();
        Ok(Self {
            out: cli.out.clone(),
            seed,
            profile,
            plant,
            settings,
            config,
        })
    }

    fn path(&self, explicit: &Option<PathBuf>, default: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.out.join(default))
    }

    fn ensure_out(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| HarnessError::io(&self.out, e))
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(HarnessError::MissingArtifact {
            path: path.display().to_string(),
            what: what.into(),
        })
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Config(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
}

fn load_campaign(ctx: &Context, explicit: &Option<PathBuf>) -> Result<Campaign> {
    let path = ctx.path(explicit, "dataset.bin");
    require_file(&path, "dataset (run `collect` first)")?;
    let campaign = load_dataset(&path)?;
    if campaign.plant_fingerprint != ctx.plant.fingerprint() {
        return Err(HarnessError::Config(format!(
            "{} was collected on a different plant configuration",
            path.display()
        )));
    }
    Ok(campaign)
}

fn history_summary(h: &TrainHistory) -> Value {
    json!({
        "n_train": h.n_train,
        "n_val": h.n_val,
        "final_val_mse": h.final_val_mse(),
        "final_train_mse": h.entries.last().map(|e| e.train_mse),
    })
}

fn teleop_config(ctx: &Context, path: &Option<PathBuf>, inverse: &Option<PathBuf>) -> Result<TeleopConfig> {
    let mut cfg = match path {
        Some(p) => TeleopConfig::load(p)?,
        None => TeleopConfig::default(),
    };
    if inverse.is_some() {
        cfg.inverse_checkpoint = inverse.clone();
    }
    if cfg.plant_config.is_none() {
        cfg.plant_config = ctx.config.plant_config.clone();
    }
    cfg.session.controller = ctx.settings.controller.clone();
    Ok(cfg)
}

/// Executes one command; the returned value is printed as the command's result.
pub fn run(cli: &Cli) -> Result<Value> {
    let ctx = Context::new(cli)?;
    match &cli.command {
        Command::Collect => {
            ctx.ensure_out()?;
            let campaign = collect(&ctx.plant, &ctx.settings)?;
            let path = ctx.out.join("dataset.bin");
            save_dataset(&campaign, &path)?;
            Ok(json!({
                "dataset": path,
                "trajectories": campaign.pairs.len(),
                "samples_per_trajectory": ctx.settings.campaign.samples_per_traj,
                "seed": ctx.seed,
            }))
        }
        Command::TrainForward(args) => {
            let campaign = load_campaign(&ctx, &args.dataset)?;
            ctx.ensure_out()?;
            let (model, history) = train_forward(&campaign, &ctx.settings)?;
            let path = ctx.out.join("forward.ckpt");
            save_checkpoint_file(&model, &path)?;
            write_json(&ctx.out.join("forward_history.json"), &history)?;
            let fidelity = forward_fidelity(&model, &held_out_pairs(&ctx.plant, &ctx.settings)?)?;
            write_json(&ctx.out.join("forward_fidelity.json"), &fidelity)?;
            Ok(json!({
                "checkpoint": path,
                "history": history_summary(&history),
                "held_out_normalized_mse": fidelity.normalized_mse,
            }))
        }
        Command::TrainInverse(args) => {
            let campaign = load_campaign(&ctx, &args.dataset)?;
            ctx.ensure_out()?;
            let (model, history) = train_inverse(&campaign, &ctx.settings)?;
            let path = ctx.out.join("inverse.ckpt");
            save_checkpoint_file(&model, &path)?;
            write_json(&ctx.out.join("inverse_history.json"), &history)?;
            Ok(json!({ "checkpoint": path, "history": history_summary(&history) }))
        }
        Command::Refine(args) => {
            let fwd_path = ctx.path(&args.forward, "forward.ckpt");
            let models = Models::load(Some(&fwd_path), None)?;
            let model = models.forward.as_deref().expect("loaded above");
            let q_d = reference(&ctx, args.experiment, args.index)?;
            let (u, state) = ilc_refine(model, &q_d, &ctx.settings.ilc)?;
            let dir = ctx.out.join("refine").join(args.experiment.name());
            write_series(
                &dir,
                &[
                    Series {
                        name: "q_d".into(),
                        sample_rate: q_d.sample_rate(),
                        data: q_d.data().clone(),
                    },
                    Series {
                        name: "u".into(),
                        sample_rate: u.sample_rate(),
                        data: u.data().clone(),
                    },
                ],
            )?;
            let summary = json!({
                "iterations": state.iter,
                "converged": state.converged,
                "error_history": state.error_history,
                "alpha": state.alpha_k,
            });
            write_json(&dir.join("ilc.json"), &summary)?;
            Ok(json!({ "dir": dir, "ilc": summary }))
        }
        Command::Evaluate(args) => {
            let kinds = if args.experiment.is_empty() {
                vec![
                    ExperimentKind::Sinusoid,
                    ExperimentKind::Random,
                    ExperimentKind::CartesianSquare,
                    ExperimentKind::TeleopReplay,
                ]
            } else {
                args.experiment.clone()
            };
            let mut settings = ctx.settings.clone();
            if args.no_plant_ilc {
                settings.plant_ilc_enabled = false;
            }
            let mut results = serde_json::Map::new();
            for kind in kinds {
                let mut spec = ExperimentSpec::new(kind, ctx.plant.clone(), settings.clone(), ctx.seed);
                spec.reference_index = args.index;
                spec.identity_feedforward = args.identity_feedforward;
                spec.command_log = args.command_log.clone();
                if kind != ExperimentKind::TeleopReplay {
                    spec.forward_checkpoint = Some(ctx.path(&args.forward, "forward.ckpt"));
                }
                spec.inverse_checkpoint = Some(ctx.path(&args.inverse, "inverse.ckpt"));
                let out = run_experiment(&spec)?;
                let dir = ctx.out.join(kind.name());
                out.write(&dir)?;
                let means: serde_json::Map<String, Value> = out
                    .report
                    .controllers
                    .iter()
                    .skip(1)
                    .filter_map(|c| out.report.mean_improvement("joint", c).map(|m| (c.clone(), json!(m))))
                    .collect();
                results.insert(kind.name().into(), json!({ "dir": dir, "mean_joint_improvement": means }));
            }
            Ok(Value::Object(results))
        }
        Command::Report(args) => {
            let report = Report::load(&args.input)?;
            match &args.output {
                Some(path) => {
                    let mut file = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
                    emit_report(&report, args.format, &mut file)?;
                    Ok(json!({ "output": path }))
                }
                None => {
                    let mut buf = Vec::new();
                    emit_report(&report, args.format, &mut buf)?;
                    print!("{}", String::from_utf8_lossy(&buf));
                    Ok(Value::Null)
                }
            }
        }
        Command::Serve(args) => {
            let mut cfg = teleop_config(&ctx, &args.teleop_config, &args.inverse)?;
            if let Some(h) = &args.host {
                cfg.host = h.clone();
            }
            if let Some(p) = args.port {
                cfg.port = p;
            }
            if args.record_dir.is_some() {
                cfg.record_dir = args.record_dir.clone();
            }
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(|e| HarnessError::io(Path::new("<runtime>"), e))?;
            rt.block_on(async {
                let server = TeleopServer::bind(&cfg).await?;
                let addr = server.local_addr()?;
                eprintln!("{}", json!({ "listening": addr.to_string() }));
                server
                    .run(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await?;
                Ok::<_, HarnessError>(json!({ "stopped": addr.to_string() }))
            })
        }
        Command::Replay(args) => {
            let cfg = teleop_config(&ctx, &args.teleop_config, &args.inverse)?;
            let mut resolved = cfg.resolve()?;
            resolved.session.comp_on = args.comp_on;
            let log = match &args.log {
                Some(p) => {
                    require_file(p, "command log")?;
                    CommandLog::load(p)?
                }
                None => synthetic_command_log(ctx.seed, SYNTHETIC_LOG_TICKS),
            };
            let ticks = args.ticks.unwrap_or_else(|| log.last_tick().map_or(0, |t| t + 1) + 100);
            let out = replay(&resolved, &log, ticks)?;
            let dir = ctx.out.join("replay");
            std::fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
            if args.log.is_none() {
                log.save(dir.join("commands.jsonl"))?;
            }
            let path = dir.join("telemetry.jsonl");
            let mut text = String::new();
            for s in &out.states {
                text.push_str(&flexcomp_teleop::TeleopMessage::State(s.clone()).to_json());
                text.push('\n');
            }
            std::fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))?;
            Ok(json!({
                "telemetry": path,
                "ticks": out.states.len(),
                "errors": out.errors.len(),
                "final_err_l2_window": out.states.last().map(|s| s.err_l2_window),
            }))
        }
    }
}

fn reference(ctx: &Context, kind: ExperimentKind, index: u64) -> Result<flexcomp_core::Trajectory> {
    use crate::pipeline::{held_out_reference, HeldOutKind};
    match kind {
        ExperimentKind::Sinusoid => held_out_reference(&ctx.plant, &ctx.settings, HeldOutKind::Sinusoid, index),
        ExperimentKind::Random => held_out_reference(&ctx.plant, &ctx.settings, HeldOutKind::Random, index),
        ExperimentKind::CartesianSquare => {
            Ok(crate::cartesian::cartesian_square_reference(&ctx.plant, &ctx.settings.square)?.q_d)
        }
        ExperimentKind::TeleopReplay => Err(HarnessError::Config(
            "teleop replay has no offline reference to refine".into(),
        )),
    }
}

/// Machine-readable error line for stderr.
pub fn error_json(e: &HarnessError) -> String {
    json!({ "error": { "code": e.code(), "message": e.to_string() } }).to_string()
}
