//! Experiment orchestration: config documents, deterministic runs, manifests,
//! and report emission.
//!
//! Every run writes three things into its output directory: `rows.csv` (the
//! measurements, fixed column order), `summary.json` (aggregates), and
//! `manifest.json` (an echo of the spec plus seeds and wall time). Rerunning
//! from a manifest reproduces the CSV bodies byte for byte.

pub mod experiments;
pub mod probes;
pub mod report;
pub mod silhouette;

use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::bounds::{
    crossover_scan, format_float, report_summary_json, verify_bound_montecarlo, BoundConfig,
    CrossoverConfig, CrossoverReport, Target, write_report_csv,
};
use crate::cartpole::{read_dataset, write_dataset, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::estimators::models_to_doc;
use crate::gsa::checkpoint::{load_checkpoint, save_checkpoint_full, RngState};
use crate::gsa::eval::evaluate_icl;
use crate::gsa::train::{train, write_curve_csv, Sequence, TrainConfig};
use crate::gsa::{GsaConfig, GsaModel};
use crate::rng;
use crate::tabular::{
    family_from_doc, family_to_doc, sample_env_family, ContextMode, EnvFamilyConfig, EnvKind,
};
use experiments::{cartpole_icl_experiment, CartpoleIclConfig, DimStats};
use probes::{predictive_coding_probe, silhouette_probe};
use report::{summarize_rows, write_rows_csv, ReportRow};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// Seedless family parameters; the run seed completes them.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyParams {
    pub count: usize,
    pub dims: (usize, usize, usize),
    pub concentration: f64,
    #[serde(default)]
    pub determinism_fraction: f64,
    #[serde(default = "default_kind")]
    pub kind: EnvKind,
}

fn default_kind() -> EnvKind {
    EnvKind::Mdp
}

impl FamilyParams {
    pub fn to_config(&self, seed: u64) -> EnvFamilyConfig {
        EnvFamilyConfig {
            count: self.count,
            dims: self.dims,
            concentration: self.concentration,
            determinism_fraction: self.determinism_fraction,
            kind: self.kind,
            seed,
        }
    }
}

/// Which environment bound verification targets.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSpec {
    /// Index into the training family.
    Seen { index: usize },
    /// A held-out environment sampled from the same law.
    Holdout,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExperimentSpec {
    BoundVerify {
        seed: u64,
        family: FamilyParams,
        target: TargetSpec,
        delta: f64,
        t_grid: Vec<u64>,
        trials: usize,
        #[serde(default = "default_fit_samples")]
        fit_samples: usize,
        #[serde(default = "default_fit_smoothing")]
        fit_smoothing: f64,
    },
    Crossover {
        seed: u64,
        n_envs_list: Vec<usize>,
        dims_list: Vec<(usize, usize, usize)>,
        t_grid: Vec<u64>,
        trials: usize,
        concentration: f64,
        #[serde(default = "default_fit_samples")]
        fit_samples: usize,
        #[serde(default)]
        min_best_tv: f64,
    },
    CartpoleIcl(CartpoleIclConfig),
    ProbePredictiveCoding {
        seed: u64,
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[serde(default = "default_positions")]
        positions: Vec<usize>,
        #[serde(default = "default_ks")]
        ks: Vec<usize>,
        #[serde(default = "default_bootstrap")]
        bootstrap: usize,
        #[serde(default = "default_max_sequences")]
        max_sequences: usize,
    },
    ProbeSilhouette {
        seed: u64,
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[serde(default)]
        layers: Vec<usize>,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default = "default_probe_envs")]
        envs: usize,
        #[serde(default = "default_probe_traj")]
        traj_per_env: usize,
    },
}

fn default_fit_samples() -> usize {
    100_000
}
fn default_fit_smoothing() -> f64 {
    1.0
}
fn default_positions() -> Vec<usize> {
    vec![10, 100, 180]
}
fn default_ks() -> Vec<usize> {
    vec![1, 8]
}
fn default_bootstrap() -> usize {
    1000
}
fn default_max_sequences() -> usize {
    64
}
fn default_stride() -> usize {
    10
}
fn default_probe_envs() -> usize {
    4
}
fn default_probe_traj() -> usize {
    3
}

impl ExperimentSpec {
    pub fn seed(&self) -> u64 {
        match self {
            ExperimentSpec::BoundVerify { seed, .. }
            | ExperimentSpec::Crossover { seed, .. }
            | ExperimentSpec::ProbePredictiveCoding { seed, .. }
            | ExperimentSpec::ProbeSilhouette { seed, .. } => *seed,
            ExperimentSpec::CartpoleIcl(cfg) => cfg.seed,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ExperimentSpec::BoundVerify { .. } => "bound_verify",
            ExperimentSpec::Crossover { .. } => "crossover",
            ExperimentSpec::CartpoleIcl(_) => "cartpole_icl",
            ExperimentSpec::ProbePredictiveCoding { .. } => "probe_predictive_coding",
            ExperimentSpec::ProbeSilhouette { .. } => "probe_silhouette",
        }
    }
}

/// FNV-1a over the canonical spec JSON; the run's stable identifier.
pub fn experiment_id(spec_json: &str, seed: u64) -> String {
    let mut h = 0xcbf29ce484222325u64 ^ seed;
    for b in spec_json.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub experiment_id: String,
    pub kind: String,
    pub spec: serde_json::Value,
    pub seed: u64,
    pub crate_version: String,
    pub wall_time_ms: u128,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub outputs: Vec<String>,
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut f = fs::File::create(dir.join(name))?;
    f.write_all(bytes)?;
    Ok(())
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> Result<()> {
    write_file(dir, name, serde_json::to_string_pretty(value)?.as_bytes())
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    write_json(dir, "manifest.json", &serde_json::to_value(manifest)?)
}

/// Run an experiment into `out_dir`, writing rows, summary, and manifest.
/// On a mid-run failure a partial manifest with the error is still written.
pub fn run(spec: &ExperimentSpec, out_dir: &Path) -> Result<Manifest> {
    let started = Instant::now();
    let spec_value = serde_json::to_value(spec)?;
    let spec_json = serde_json::to_string(&spec_value)?;
    let id = experiment_id(&spec_json, spec.seed());
    fs::create_dir_all(out_dir)?;

    let result = run_inner(spec, &id, out_dir);
    let (status, error, outputs) = match &result {
        Ok(outputs) => ("ok".to_string(), None, outputs.clone()),
        Err(e) => ("aborted".to_string(), Some(e.to_string()), Vec::new()),
    };
    let manifest = Manifest {
        format_version: MANIFEST_FORMAT_VERSION,
        experiment_id: id,
        kind: spec.kind_name().to_string(),
        spec: spec_value,
        seed: spec.seed(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_ms: started.elapsed().as_millis(),
        status,
        error,
        outputs,
    };
    write_manifest(out_dir, &manifest)?;
    result.map(|_| manifest)
}

/// Re-run the experiment echoed in a manifest file.
pub fn rerun_from_manifest(manifest_path: &Path, out_dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let spec: ExperimentSpec = serde_json::from_value(manifest.spec)?;
    run(&spec, out_dir)
}

fn run_inner(spec: &ExperimentSpec, id: &str, out_dir: &Path) -> Result<Vec<String>> {
    match spec {
        ExperimentSpec::BoundVerify {
            seed,
            family,
            target,
            delta,
            t_grid,
            trials,
            fit_samples,
            fit_smoothing,
        } => {
            let fam_cfg = family.to_config(rng::derive(*seed, &[0xfa]));
            let envs = sample_env_family(&fam_cfg)?;
            let target = match target {
                TargetSpec::Seen { index } => Target::Seen(*index),
                TargetSpec::Holdout => {
                    let mut h_cfg = fam_cfg.clone();
                    h_cfg.count = 1;
                    h_cfg.seed = rng::derive(*seed, &[0x40]);
                    Target::Holdout(sample_env_family(&h_cfg)?.remove(0))
                }
            };
            let cfg = BoundConfig {
                delta: *delta,
                t_grid: t_grid.clone(),
                trials: *trials,
                seed: rng::derive(*seed, &[0x71]),
                fit_samples: *fit_samples,
                fit_smoothing: *fit_smoothing,
            context_mode: ContextMode::UniformQuery,
            };
            let report = verify_bound_montecarlo(&envs, &target, &cfg)?;
            let mut csv = Vec::new();
            write_report_csv(&report, &mut csv)?;
            write_file(out_dir, "rows.csv", &csv)?;
            write_json(out_dir, "summary.json", &report_summary_json(&report))?;
            Ok(vec!["rows.csv".into(), "summary.json".into()])
        }
        ExperimentSpec::Crossover {
            seed,
            n_envs_list,
            dims_list,
            t_grid,
            trials,
            concentration,
            fit_samples,
            min_best_tv,
        } => {
            let cfg = CrossoverConfig {
                n_envs_list: n_envs_list.clone(),
                dims_list: dims_list.clone(),
                t_grid: t_grid.clone(),
                trials: *trials,
                concentration: *concentration,
                seed: *seed,
                fit_samples: *fit_samples,
                min_best_tv: *min_best_tv,
            };
            let report = crossover_scan(&cfg)?;
            let mut csv = Vec::new();
            write_crossover_csv(&report, &mut csv)?;
            write_file(out_dir, "rows.csv", &csv)?;
            write_json(out_dir, "summary.json", &serde_json::to_value(&report)?)?;
            Ok(vec!["rows.csv".into(), "summary.json".into()])
        }
        ExperimentSpec::CartpoleIcl(cfg) => {
            let result = cartpole_icl_experiment(cfg, id)?;
            let mut csv = Vec::new();
            write_rows_csv(&result.rows, &mut csv)?;
            write_file(out_dir, "rows.csv", &csv)?;
            write_json(out_dir, "summary.json", &result.summary)?;
            let mut outputs = vec!["rows.csv".to_string(), "summary.json".to_string()];
            let extra = serde_json::json!({ "normalizer": result.stats });
            for (name, model) in &result.models {
                let file = format!("model_{name}.ckpt");
                let mut buf = Vec::new();
                save_checkpoint_full(
                    model,
                    0,
                    RngState { seed: cfg.seed, word_pos: 0 },
                    Some(extra.clone()),
                    &mut buf,
                )?;
                write_file(out_dir, &file, &buf)?;
                outputs.push(file);
            }
            for (name, curve) in &result.curves {
                let file = format!("loss_{name}.csv");
                let mut buf = Vec::new();
                write_curve_csv(curve, &mut buf)?;
                write_file(out_dir, &file, &buf)?;
                outputs.push(file);
            }
            Ok(outputs)
        }
        ExperimentSpec::ProbePredictiveCoding {
            seed,
            checkpoint,
            dataset,
            positions,
            ks,
            bootstrap,
            max_sequences,
        } => {
            let (model, stats) = load_model_with_normalizer(checkpoint)?;
            let data = load_dataset_file(dataset)?;
            let sequences: Vec<Sequence> = data
                .trajectories
                .iter()
                .take(*max_sequences)
                .map(|t| stats.standardize(t))
                .collect();
            let report =
                predictive_coding_probe(&model, &sequences, positions, ks, *bootstrap, *seed)?;
            let rows: Vec<ReportRow> = report
                .points
                .iter()
                .enumerate()
                .flat_map(|(i, p)| {
                    [
                        ReportRow {
                            experiment_id: id.to_string(),
                            model_id: "checkpoint".into(),
                            t: p.position as u64,
                            k: Some(p.k as u64),
                            metric: "pred_mse".into(),
                            value: p.pred_mse,
                            trial: i as u64,
                            seen: None,
                        },
                        ReportRow {
                            experiment_id: id.to_string(),
                            model_id: "checkpoint".into(),
                            t: p.position as u64,
                            k: Some(p.k as u64),
                            metric: "delta_mse".into(),
                            value: p.delta_mse,
                            trial: i as u64,
                            seen: None,
                        },
                    ]
                })
                .collect();
            let mut csv = Vec::new();
            write_rows_csv(&rows, &mut csv)?;
            write_file(out_dir, "rows.csv", &csv)?;
            write_json(
                out_dir,
                "summary.json",
                &serde_json::json!({
                    "rho": report.rho,
                    "rho_ci_low": report.rho_ci_low,
                    "rho_ci_high": report.rho_ci_high,
                    "rho_per_k": report.rho_per_k,
                    "points": report.points.len(),
                    "bootstrap_resamples": report.bootstrap_resamples,
                }),
            )?;
            Ok(vec!["rows.csv".into(), "summary.json".into()])
        }
        ExperimentSpec::ProbeSilhouette {
            seed: _,
            checkpoint,
            dataset,
            layers,
            stride,
            envs,
            traj_per_env,
        } => {
            let (model, stats) = load_model_with_normalizer(checkpoint)?;
            let data = load_dataset_file(dataset)?;
            if data.envs.len() < 2 || *envs < 2 {
                return Err(Error::Config(
                    "silhouette probe needs at least 2 environments".into(),
                ));
            }
            let layers = if layers.is_empty() {
                (0..model.config.layers).collect()
            } else {
                layers.clone()
            };
            let use_envs = (*envs).min(data.envs.len());
            let mut sequences = Vec::new();
            let mut env_of = Vec::new();
            for e in 0..use_envs {
                for t in 0..*traj_per_env {
                    let idx = e * data.spec.traj_per_env + t;
                    if idx < data.trajectories.len() && data.env_of(idx) == e {
                        sequences.push(stats.standardize(&data.trajectories[idx]));
                        env_of.push(e);
                    }
                }
            }
            let (rep, dump) = silhouette_probe(&model, &sequences, &env_of, &layers, *stride)?;
            let rows: Vec<ReportRow> = rep
                .per_layer
                .iter()
                .map(|&(layer, score)| ReportRow {
                    experiment_id: id.to_string(),
                    model_id: "checkpoint".into(),
                    t: 0,
                    k: None,
                    metric: "silhouette".into(),
                    value: score,
                    trial: layer as u64,
                    seen: None,
                })
                .collect();
            let mut csv = Vec::new();
            write_rows_csv(&rows, &mut csv)?;
            write_file(out_dir, "rows.csv", &csv)?;
            write_json(
                out_dir,
                "summary.json",
                &serde_json::json!({
                    "per_layer": rep.per_layer,
                    "points_per_layer": rep.points_per_layer,
                    "stride": rep.stride,
                }),
            )?;
            // Raw memory vectors for external visualization.
            let mut mem = Vec::new();
            write_memory_csv(&dump, &env_of, &mut mem)?;
            write_file(out_dir, "memory_states.csv", &mem)?;
            Ok(vec!["rows.csv".into(), "summary.json".into(), "memory_states.csv".into()])
        }
    }
}

fn write_crossover_csv<W: Write>(report: &CrossoverReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "n_envs",
        "S",
        "A",
        "O",
        "T",
        "el_median_unseen",
        "er_median_unseen",
        "el_median_seen",
        "er_median_seen",
    ])?;
    for cell in &report.cells {
        for (i, &t) in cell.t_grid.iter().enumerate() {
            w.write_record(&[
                cell.n_envs.to_string(),
                cell.dims.0.to_string(),
                cell.dims.1.to_string(),
                cell.dims.2.to_string(),
                t.to_string(),
                format_float(cell.el_median_unseen[i]),
                format_float(cell.er_median_unseen[i]),
                format_float(cell.el_median_seen[i]),
                format_float(cell.er_median_seen[i]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_memory_csv<W: Write>(
    dump: &crate::gsa::eval::MemoryDump,
    env_of: &[usize],
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let width = dump.rows.first().map(|r| r.state.len()).unwrap_or(0);
    let mut header =
        vec!["sequence".to_string(), "env".to_string(), "step".to_string(), "layer".to_string()];
    header.extend((0..width).map(|i| format!("v{i}")));
    w.write_record(&header)?;
    for row in &dump.rows {
        let mut rec = vec![
            row.sequence.to_string(),
            env_of[row.sequence].to_string(),
            row.step.to_string(),
            row.layer.to_string(),
        ];
        rec.extend(row.state.iter().map(|&v| format_float(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn load_dataset_file(path: &Path) -> Result<Dataset> {
    let f = fs::File::open(path)
        .map_err(|e| Error::Config(format!("cannot open dataset {}: {e}", path.display())))?;
    read_dataset(std::io::BufReader::new(f))
}

fn load_model_with_normalizer(path: &Path) -> Result<(GsaModel, DimStats)> {
    let f = fs::File::open(path)
        .map_err(|e| Error::Config(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let (model, meta) = load_checkpoint(std::io::BufReader::new(f))?;
    let stats: DimStats = meta
        .extra
        .as_ref()
        .and_then(|e| e.get("normalizer"))
        .and_then(|n| serde_json::from_value(n.clone()).ok())
        .ok_or_else(|| {
            Error::Config("checkpoint carries no normalizer; train it through this harness".into())
        })?;
    Ok((model, stats))
}

// ---------------------------------------------------------------------------
// Artifact jobs backing the CLI subcommands.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildDatasetJob {
    pub spec: DatasetSpec,
    pub seed: u64,
    #[serde(default)]
    pub emit_json: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitModelsJob {
    /// Path to an environment family document.
    pub envs: PathBuf,
    #[serde(default = "default_fit_samples")]
    pub fit_samples: usize,
    #[serde(default = "default_fit_smoothing")]
    pub smoothing: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJob {
    pub dataset: PathBuf,
    pub model: GsaConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalIclJob {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub t_grid: Vec<usize>,
    pub k_list: Vec<usize>,
    #[serde(default)]
    pub max_envs: Option<usize>,
}

fn job_manifest(
    kind: &str,
    spec: serde_json::Value,
    seed: u64,
    outputs: Vec<String>,
    started: Instant,
) -> Manifest {
    let id = experiment_id(&spec.to_string(), seed);
    Manifest {
        format_version: MANIFEST_FORMAT_VERSION,
        experiment_id: id,
        kind: kind.to_string(),
        spec,
        seed,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_ms: started.elapsed().as_millis(),
        status: "ok".into(),
        error: None,
        outputs,
    }
}

/// Generate and serialize an environment family.
pub fn gen_envs_job(config: &EnvFamilyConfig, out_dir: &Path) -> Result<Manifest> {
    let started = Instant::now();
    let envs = sample_env_family(config)?;
    let doc = family_to_doc(config, &envs);
    write_json(out_dir, "envs.json", &serde_json::to_value(&doc)?)?;
    let m = job_manifest(
        "gen_envs",
        serde_json::to_value(config)?,
        config.seed,
        vec!["envs.json".into()],
        started,
    );
    write_manifest(out_dir, &m)?;
    Ok(m)
}

/// Build a cart-pole dataset container (plus optional JSON variant).
pub fn build_dataset_job(job: &BuildDatasetJob, out_dir: &Path) -> Result<Manifest> {
    let started = Instant::now();
    let dataset = crate::cartpole::build_dataset(&job.spec, job.seed)?;
    let mut buf = Vec::new();
    write_dataset(&dataset, &mut buf)?;
    write_file(out_dir, "dataset.bin", &buf)?;
    let mut outputs = vec!["dataset.bin".to_string()];
    if job.emit_json {
        write_file(
            out_dir,
            "dataset.json",
            crate::cartpole::dataset_to_json(&dataset)?.as_bytes(),
        )?;
        outputs.push("dataset.json".into());
    }
    let m = job_manifest("build_dataset", serde_json::to_value(job)?, job.seed, outputs, started);
    write_manifest(out_dir, &m)?;
    Ok(m)
}

/// Fit per-environment tabular models from a family document.
pub fn fit_models_job(job: &FitModelsJob, out_dir: &Path) -> Result<Manifest> {
    let started = Instant::now();
    let text = fs::read_to_string(&job.envs)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", job.envs.display())))?;
    let doc = serde_json::from_str(&text)?;
    let envs = family_from_doc(&doc)?;
    let models = crate::bounds::fit_family_models(&envs, job.fit_samples, job.smoothing, job.seed)?;
    write_json(out_dir, "models.json", &serde_json::to_value(models_to_doc(&models)?)?)?;
    let m = job_manifest(
        "fit_models",
        serde_json::to_value(job)?,
        job.seed,
        vec!["models.json".into()],
        started,
    );
    write_manifest(out_dir, &m)?;
    Ok(m)
}

/// Train a world model on a dataset file; writes a checkpoint (with the
/// standardization constants embedded) and the loss curve.
pub fn train_job(job: &TrainJob, out_dir: &Path) -> Result<Manifest> {
    let started = Instant::now();
    let dataset = load_dataset_file(&job.dataset)?;
    let stats = DimStats::from_trajectories(&dataset.trajectories)?;
    let sequences: Vec<Sequence> =
        dataset.trajectories.iter().map(|t| stats.standardize(t)).collect();
    let mut model = GsaModel::new(job.model.clone(), rng::derive(job.train.seed, &[0x6e17]))?;
    let curve = train(&mut model, &sequences, &job.train)?;
    let steps = curve.len() as u64;
    let mut ckpt = Vec::new();
    save_checkpoint_full(
        &model,
        steps,
        RngState { seed: job.train.seed, word_pos: 0 },
        Some(serde_json::json!({ "normalizer": stats })),
        &mut ckpt,
    )?;
    write_file(out_dir, "checkpoint.bin", &ckpt)?;
    let mut curve_csv = Vec::new();
    write_curve_csv(&curve, &mut curve_csv)?;
    write_file(out_dir, "loss.csv", &curve_csv)?;
    let m = job_manifest(
        "train",
        serde_json::to_value(job)?,
        job.train.seed,
        vec!["checkpoint.bin".into(), "loss.csv".into()],
        started,
    );
    write_manifest(out_dir, &m)?;
    Ok(m)
}

/// Evaluate a checkpoint on an evaluation dataset, one row per environment
/// and `(T, k)` cell.
pub fn eval_icl_job(job: &EvalIclJob, out_dir: &Path) -> Result<Manifest> {
    let started = Instant::now();
    let (model, stats) = load_model_with_normalizer(&job.checkpoint)?;
    let dataset = load_dataset_file(&job.dataset)?;
    let id = experiment_id(&serde_json::to_string(job)?, 0);
    let n_envs = job.max_envs.unwrap_or(dataset.envs.len()).min(dataset.envs.len());
    let mut rows = Vec::new();
    for env in 0..n_envs {
        let seqs: Vec<Sequence> = dataset
            .trajectories
            .iter()
            .enumerate()
            .filter(|(i, _)| dataset.env_of(*i) == env)
            .map(|(_, t)| stats.standardize(t))
            .collect();
        let table = evaluate_icl(&model, &seqs, &job.t_grid, &job.k_list)?;
        for cell in table.cells.iter().filter(|c| c.sequences > 0) {
            rows.push(ReportRow {
                experiment_id: id.clone(),
                model_id: "checkpoint".into(),
                t: cell.t as u64,
                k: Some(cell.k as u64),
                metric: "std_mse".into(),
                value: cell.mse,
                trial: env as u64,
                seen: None,
            });
        }
    }
    let mut csv = Vec::new();
    write_rows_csv(&rows, &mut csv)?;
    write_file(out_dir, "rows.csv", &csv)?;
    write_json(out_dir, "summary.json", &summarize_rows(&rows))?;
    let m = job_manifest(
        "eval_icl",
        serde_json::to_value(job)?,
        0,
        vec!["rows.csv".into(), "summary.json".into()],
        started,
    );
    write_manifest(out_dir, &m)?;
    Ok(m)
}

/// Regenerate a summary from an existing rows file.
pub fn report_job(rows_path: &Path, out_dir: &Path) -> Result<Manifest> {
    let started = Instant::now();
    let f = fs::File::open(rows_path)
        .map_err(|e| Error::Config(format!("cannot open {}: {e}", rows_path.display())))?;
    let rows = report::read_rows_csv(std::io::BufReader::new(f))?;
    write_json(out_dir, "summary.json", &summarize_rows(&rows))?;
    let m = job_manifest(
        "report",
        serde_json::json!({ "rows": rows_path.display().to_string() }),
        0,
        vec!["summary.json".into()],
        started,
    );
    write_manifest(out_dir, &m)?;
    Ok(m)
}
