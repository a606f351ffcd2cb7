//! Thin command-line front end; all work happens in the library.
//!
//! Every subcommand reads a JSON config document (see `schemas/` for the
//! field reference), runs the corresponding harness entry point, and writes
//! its outputs plus a manifest into the output directory.
//!
//! Exit codes: 0 success, 2 configuration/contract error, 3 numerical
//! failure.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use ctxworld::error::{Error, Result};
use ctxworld::harness::{
    self, build_dataset_job, eval_icl_job, fit_models_job, gen_envs_job, report_job, train_job,
    BuildDatasetJob, EvalIclJob, ExperimentSpec, FitModelsJob, TrainJob,
};
use ctxworld::tabular::EnvFamilyConfig;

#[derive(Parser)]
#[command(
    name = "ctxworld",
    about = "In-context world models: tabular estimators, bound verification, and a gated slot attention sequence model on randomized cart-pole physics",
    version
)]
struct Cli {
    /// JSON config document for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "runs/out")]
    out_dir: PathBuf,

    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a tabular environment family (envs.json).
    GenEnvs,
    /// Build a cart-pole trajectory dataset (dataset.bin).
    BuildDataset,
    /// Fit per-environment tabular models from an envs.json (models.json).
    FitModels,
    /// Monte-Carlo verification of the two error bounds.
    VerifyBounds,
    /// Sweep the context length where count-based estimation overtakes
    /// recognition.
    Crossover,
    /// Train a world model on a dataset (checkpoint.bin + loss.csv).
    Train,
    /// Autoregressive in-context evaluation of a checkpoint.
    EvalIcl,
    /// Prediction-error sensitivity probe on a checkpoint.
    ProbePc,
    /// Memory-state silhouette probe on a checkpoint.
    ProbeSilhouette,
    /// Regenerate summary.json from an existing rows.csv.
    Report,
    /// Run any experiment spec document (including the cart-pole comparison).
    Run,
}

fn load_config_value(cli: &Cli) -> Result<serde_json::Value> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config <json path> is required".into()))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)?;
    if let Some(seed) = cli.seed {
        override_seed(&mut value, seed);
    }
    Ok(value)
}

fn override_seed(value: &mut serde_json::Value, seed: u64) {
    if let Some(obj) = value.as_object_mut() {
        if obj.contains_key("train") {
            if let Some(train) = obj.get_mut("train").and_then(|t| t.as_object_mut()) {
                if train.contains_key("seed") {
                    train.insert("seed".into(), seed.into());
                }
            }
        }
        obj.insert("seed".into(), seed.into());
    }
}

/// Parse an experiment spec, injecting the expected `kind` tag when the
/// document omits it, and rejecting mismatched kinds.
fn parse_experiment(mut value: serde_json::Value, expect_kind: Option<&str>) -> Result<ExperimentSpec> {
    if let (Some(kind), Some(obj)) = (expect_kind, value.as_object_mut()) {
        obj.entry("kind").or_insert_with(|| kind.into());
    }
    let spec: ExperimentSpec = serde_json::from_value(value)
        .map_err(|e| Error::Config(format!("invalid experiment config: {e}")))?;
    if let Some(kind) = expect_kind {
        if spec.kind_name() != kind {
            return Err(Error::Config(format!(
                "config kind {} does not match subcommand {kind}",
                spec.kind_name()
            )));
        }
    }
    Ok(spec)
}

fn parse<T: serde::de::DeserializeOwned>(value: serde_json::Value) -> Result<T> {
    serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid config: {e}")))
}

fn dispatch(cli: &Cli) -> Result<()> {
    let out = &cli.out_dir;
    match &cli.command {
        Command::GenEnvs => {
            let cfg: EnvFamilyConfig = parse(load_config_value(cli)?)?;
            let m = gen_envs_job(&cfg, out)?;
            println!("wrote {} environment(s) to {}", cfg.count, out.display());
            println!("experiment_id {}", m.experiment_id);
        }
        Command::BuildDataset => {
            let job: BuildDatasetJob = parse(load_config_value(cli)?)?;
            let m = build_dataset_job(&job, out)?;
            println!(
                "wrote dataset ({} envs x {} traj x {} steps) to {}",
                job.spec.num_envs,
                job.spec.traj_per_env,
                job.spec.length,
                out.display()
            );
            println!("experiment_id {}", m.experiment_id);
        }
        Command::FitModels => {
            let job: FitModelsJob = parse(load_config_value(cli)?)?;
            let m = fit_models_job(&job, out)?;
            println!("wrote models.json to {}", out.display());
            println!("experiment_id {}", m.experiment_id);
        }
        Command::VerifyBounds => {
            let spec = parse_experiment(load_config_value(cli)?, Some("bound_verify"))?;
            let m = harness::run(&spec, out)?;
            println!("bound verification finished in {} ms", m.wall_time_ms);
            print_outputs(&m, out);
        }
        Command::Crossover => {
            let spec = parse_experiment(load_config_value(cli)?, Some("crossover"))?;
            let m = harness::run(&spec, out)?;
            println!("crossover scan finished in {} ms", m.wall_time_ms);
            print_outputs(&m, out);
        }
        Command::Train => {
            let job: TrainJob = parse(load_config_value(cli)?)?;
            let m = train_job(&job, out)?;
            println!("trained model; checkpoint and loss curve in {}", out.display());
            println!("experiment_id {}", m.experiment_id);
        }
        Command::EvalIcl => {
            let job: EvalIclJob = parse(load_config_value(cli)?)?;
            let m = eval_icl_job(&job, out)?;
            print_outputs(&m, out);
        }
        Command::ProbePc => {
            let spec = parse_experiment(load_config_value(cli)?, Some("probe_predictive_coding"))?;
            let m = harness::run(&spec, out)?;
            print_outputs(&m, out);
        }
        Command::ProbeSilhouette => {
            let spec = parse_experiment(load_config_value(cli)?, Some("probe_silhouette"))?;
            let m = harness::run(&spec, out)?;
            print_outputs(&m, out);
        }
        Command::Report => {
            let value = load_config_value(cli)?;
            let rows = value
                .get("rows")
                .and_then(|r| r.as_str())
                .ok_or_else(|| Error::Config("report config needs a \"rows\" path".into()))?;
            let m = report_job(std::path::Path::new(rows), out)?;
            print_outputs(&m, out);
        }
        Command::Run => {
            let spec = parse_experiment(load_config_value(cli)?, None)?;
            let m = harness::run(&spec, out)?;
            println!("{} finished in {} ms", m.kind, m.wall_time_ms);
            print_outputs(&m, out);
        }
    }
    Ok(())
}

fn print_outputs(m: &harness::Manifest, out: &std::path::Path) {
    println!("experiment_id {}", m.experiment_id);
    for f in &m.outputs {
        println!("  {}", out.join(f).display());
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) =
            rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global()
        {
            eprintln!("warning: could not configure thread pool: {e}");
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
