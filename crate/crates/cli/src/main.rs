//! Command-line front end. Every verb reads one JSON config (defaults when
//! omitted) plus `--set section.key=value` overrides.
//!
//! Exit codes: 0 success, 2 config error, 3 stage failure, 4 threshold
//! failure in `evaluate --assert`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use tacmap::gradient_model::{read_dataset, write_dataset, MlpModel};
use tacmap::pipeline::{self, PipelineConfig, PipelineError};

#[derive(Parser)]
#[command(name = "tacmap", version, about = "Tactile surface reconstruction")]
struct Cli {
    /// JSON config file; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set registration.voxel=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the scenario and export local maps and the true trajectory.
    Simulate {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Calibrate {
        #[command(subcommand)]
        what: CalibrateCmd,
    },
    Dataset {
        #[command(subcommand)]
        what: DatasetCmd,
    },
    Model {
        #[command(subcommand)]
        what: ModelCmd,
    },
    /// Run every stage and export map, trajectories, loops and metrics.
    Reconstruct,
    /// The 2×2 grid over correction and optimization.
    Ablate,
    /// Metrics of an exported map and trajectory.
    Evaluate(EvaluateArgs),
}

#[derive(Subcommand)]
enum CalibrateCmd {
    /// Capture the standard frame used by pressure correction.
    Standard {
        /// Output stem; writes `<stem>.ply` and `<stem>.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Render and auto-label sphere presses into pixel samples.
    Build {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ModelCmd {
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pitch/yaw fit on presses of the evaluation sphere.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct EvaluateArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    trajectory: PathBuf,
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Reference cloud (PLY) for the deviation metric.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Exit with code 4 when any given threshold is exceeded.
    #[arg(long)]
    assert: bool,
    #[arg(long)]
    max_flatness: Option<f64>,
    #[arg(long)]
    max_rpe: Option<f64>,
    #[arg(long)]
    max_e_mean: Option<f64>,
    #[arg(long)]
    max_e_std: Option<f64>,
}

enum Failure {
    Pipeline(PipelineError),
    Assert(Vec<String>),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Self::Pipeline(e)
    }
}

fn stage(stage: &'static str) -> impl Fn(tacmap::gradient_model::ModelError) -> Failure {
    move |e| Failure::Pipeline(PipelineError::Stage { stage, msg: e.to_string() })
}

fn print(v: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&v).expect("json value serializes"));
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = match &cli.config {
        Some(p) => pipeline::load_config_file(p, &cli.set)?,
        None => pipeline::load_config("{}", &cli.set)?,
    };
    let out = |o: &Option<PathBuf>, name: &str| o.clone().unwrap_or_else(|| cfg.output_dir.join(name));
    match &cli.cmd {
        Cmd::Simulate { out: dir } => {
            let dir = dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
            let files = pipeline::simulate(&cfg, &dir)?;
            print(json!({ "files": files }));
        }
        Cmd::Calibrate { what: CalibrateCmd::Standard { out: stem } } => {
            let stem = out(stem, "standard");
            let std = pipeline::calibrate_standard(&cfg, &stem)?;
            print(json!({ "stem": stem, "deviation": std.deviation() }));
        }
        Cmd::Dataset { what: DatasetCmd::Build { out: path } } => {
            let path = out(path, "dataset.bin");
            let (samples, summary) = pipeline::build_model_dataset(&cfg)?;
            create_parent(&path)?;
            write_dataset(&path, &samples).map_err(stage("dataset"))?;
            print(json!({ "path": path, "samples": samples.len(), "summary": summary }));
        }
        Cmd::Model { what: ModelCmd::Train { dataset, out: path } } => {
            let samples = read_dataset(&out(dataset, "dataset.bin")).map_err(stage("train"))?;
            let (model, report) = pipeline::train_model(&cfg, &samples)?;
            let path = out(path, "model.json");
            create_parent(&path)?;
            model.save(&path).map_err(stage("train"))?;
            print(json!({
                "path": path,
                "epochs": report.epoch_loss.len(),
                "best_epoch": report.best_epoch,
                "best_validation_mse": report.best_validation_mse,
                "stopped_early": report.stopped_early,
            }));
        }
        Cmd::Model { what: ModelCmd::Eval { model } } => {
            let m = MlpModel::load(&out(model, "model.json")).map_err(stage("model_eval"))?;
            print(json!(pipeline::evaluate_model(&cfg, &m)?));
        }
        Cmd::Reconstruct => {
            let manifest = pipeline::run_reconstruction(&cfg)?;
            print(json!(manifest.metrics));
        }
        Cmd::Ablate => {
            let rows = pipeline::run_ablation(&cfg)?;
            print!("{}", pipeline::ablation_table(&rows));
        }
        Cmd::Evaluate(a) => evaluate(&cfg, a)?,
    }
    Ok(())
}

fn create_parent(path: &Path) -> Result<(), Failure> {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => std::fs::create_dir_all(d)
            .map_err(|e| Failure::Pipeline(PipelineError::Stage { stage: "export", msg: format!("{}: {e}", d.display()) })),
        _ => Ok(()),
    }
}

fn evaluate(cfg: &PipelineConfig, a: &EvaluateArgs) -> Result<(), Failure> {
    let config_err = |m: &str| Failure::Pipeline(PipelineError::Config(m.to_string()));
    if a.max_rpe.is_some() && a.truth.is_none() {
        return Err(config_err("--max-rpe needs --truth"));
    }
    if (a.max_e_mean.is_some() || a.max_e_std.is_some()) && a.reference.is_none() {
        return Err(config_err("--max-e-mean / --max-e-std need --reference"));
    }
    let r = pipeline::evaluate_files(&a.map, &a.trajectory, a.truth.as_deref(), a.reference.as_deref(), &cfg.metrics, cfg.seed)?;
    print(json!(r));
    if !a.assert {
        return Ok(());
    }
    let mut failed = Vec::new();
    let mut check = |name: &str, value: Option<f64>, limit: Option<f64>| {
        if let (Some(v), Some(l)) = (value, limit) {
            if !(v <= l) {
                failed.push(format!("{name} {v:.4} exceeds {l}"));
            }
        }
    };
    check("flatness", Some(r.flatness), a.max_flatness);
    check("rpe", r.rpe, a.max_rpe);
    check("e_mean", r.deviation.map(|d| d.mean), a.max_e_mean);
    check("e_std", r.deviation.map(|d| d.std), a.max_e_std);
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Assert(failed))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Pipeline(e @ PipelineError::Config(_))) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(Failure::Pipeline(e)) => {
            eprintln!("{e}");
            ExitCode::from(3)
        }
        Err(Failure::Assert(failed)) => {
            for f in failed {
                eprintln!("assert failed: {f}");
            }
            ExitCode::from(4)
        }
    }
}
