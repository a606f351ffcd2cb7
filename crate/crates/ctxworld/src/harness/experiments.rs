//! The cart-pole in-context-learning comparison: equal-budget datasets with
//! different environment counts, one trained model per dataset, and an
//! evaluation sweep over seen and unseen environments.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::ReportRow;
use crate::cartpole::{
    build_dataset, collect_trajectory, sample_params, CartPoleParams, Dataset, DatasetSpec,
    ScopeSpec, Trajectory, NOISE_RANGE,
};
use crate::error::{Error, Result};
use crate::gsa::eval::evaluate_icl;
use crate::gsa::loss::LossConfig;
use crate::gsa::tensor::Tensor;
use crate::gsa::train::{train, EpochStats, Sequence, TrainConfig};
use crate::gsa::{AdamWConfig, GsaConfig, GsaModel};
use crate::rng;

/// Per-dimension standardization constants, computed from a training set and
/// shared by every model and metric of one experiment so errors are
/// comparable across scopes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DimStats {
    pub fn from_trajectories(trajs: &[Trajectory]) -> Result<Self> {
        let dim = 4;
        let mut n = 0u64;
        let mut mean = vec![0.0; dim];
        for t in trajs {
            for obs in &t.observations {
                for (m, v) in mean.iter_mut().zip(obs.as_array()) {
                    *m += v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Config("cannot standardize an empty dataset".into()));
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for t in trajs {
            for obs in &t.observations {
                for (v, (x, m)) in var.iter_mut().zip(obs.as_array().iter().zip(&mean)) {
                    *v += (x - m) * (x - m);
                }
            }
        }
        let std = var.iter().map(|v| (v / n as f64).sqrt().max(1e-8)).collect();
        Ok(DimStats { mean, std })
    }

    pub fn standardize(&self, traj: &Trajectory) -> Sequence {
        let rows = traj.observations.len();
        let mut data = Vec::with_capacity(rows * 4);
        for obs in &traj.observations {
            for ((x, m), s) in obs.as_array().iter().zip(&self.mean).zip(&self.std) {
                data.push((x - m) / s);
            }
        }
        Sequence {
            obs: Tensor::from_vec(rows, 4, data),
            actions: traj.actions.iter().map(|&a| a as usize).collect(),
        }
    }
}

/// Training hyper-parameters of the comparison (seed and loss weights are
/// filled in by the experiment).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    #[serde(default)]
    pub mask_prob: f64,
    #[serde(default = "default_lambda_kl")]
    pub lambda_kl: f64,
    #[serde(default = "default_transition_weight")]
    pub transition_weight: f64,
}

fn default_lambda_kl() -> f64 {
    1e-3
}

fn default_transition_weight() -> f64 {
    1.0
}

impl TrainParams {
    fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_init: self.lr_init,
            lr_final: self.lr_final,
            adamw: AdamWConfig::default(),
            mask_prob: self.mask_prob,
            loss: LossConfig {
                lambda_kl: self.lambda_kl,
                transition_weight: self.transition_weight,
            },
            seed,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CartpoleIclConfig {
    pub seed: u64,
    /// Steps per trajectory.
    #[serde(default = "default_length")]
    pub length: usize,
    /// Total trajectories per training dataset (equal budgets).
    #[serde(default = "default_budget")]
    pub budget_trajectories: usize,
    /// Environment count of the many-environment dataset.
    #[serde(default = "default_many_envs")]
    pub many_envs: usize,
    /// Environments per unseen evaluation set.
    #[serde(default = "default_eval_envs")]
    pub eval_envs: usize,
    /// Trajectories per evaluation environment.
    #[serde(default = "default_eval_traj")]
    pub eval_traj_per_env: usize,
    pub model: GsaConfig,
    pub train: TrainParams,
    #[serde(default = "default_t_grid")]
    pub t_grid: Vec<usize>,
    #[serde(default = "default_k_list")]
    pub k_list: Vec<usize>,
    /// Fraction of epochs for the early-checkpoint variant of the
    /// 4-environment model.
    #[serde(default = "default_early_fraction")]
    pub early_fraction: f64,
}

fn default_length() -> usize {
    200
}
fn default_budget() -> usize {
    8192
}
fn default_many_envs() -> usize {
    1024
}
fn default_eval_envs() -> usize {
    64
}
fn default_eval_traj() -> usize {
    4
}
fn default_t_grid() -> Vec<usize> {
    vec![1, 10, 100]
}
fn default_k_list() -> Vec<usize> {
    vec![1]
}
fn default_early_fraction() -> f64 {
    0.1
}

impl CartpoleIclConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.budget_trajectories < self.many_envs || self.budget_trajectories % self.many_envs != 0
        {
            return Err(Error::Config(
                "budget_trajectories must be a positive multiple of many_envs".into(),
            ));
        }
        if self.budget_trajectories % 4 != 0 {
            return Err(Error::Config("budget_trajectories must be divisible by 4".into()));
        }
        if self.eval_envs == 0 || self.eval_traj_per_env == 0 {
            return Err(Error::Config("evaluation set sizes must be positive".into()));
        }
        let max_t = self.t_grid.iter().max().copied().unwrap_or(0);
        let max_k = self.k_list.iter().max().copied().unwrap_or(0);
        if self.t_grid.is_empty() || self.k_list.is_empty() || max_t + max_k > self.length + 1 {
            return Err(Error::Config(
                "t_grid/k_list must be nonempty and fit the trajectory length".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.early_fraction) {
            return Err(Error::Config("early_fraction must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// A named evaluation set: environment parameters and fresh trajectories.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub name: String,
    pub envs: Vec<CartPoleParams>,
    /// Sequences grouped per environment, standardized.
    pub per_env: Vec<Vec<Sequence>>,
}

/// Full output: long-format rows, the summary quantities, the trained
/// models, and the shared standardization constants.
pub struct CartpoleIclResult {
    pub rows: Vec<ReportRow>,
    pub summary: serde_json::Value,
    pub models: Vec<(String, GsaModel)>,
    pub curves: Vec<(String, Vec<EpochStats>)>,
    pub stats: DimStats,
    pub eval_sets: Vec<EvalSet>,
}

fn collect_eval_trajectories(
    envs: &[CartPoleParams],
    traj_per_env: usize,
    length: usize,
    seed: u64,
) -> Result<Vec<Vec<Trajectory>>> {
    envs.par_iter()
        .enumerate()
        .map(|(ei, params)| {
            (0..traj_per_env)
                .map(|ti| {
                    let mut r = rng::rng_at(seed, &[ei as u64, ti as u64]);
                    let noise = r.gen_range(NOISE_RANGE.0..NOISE_RANGE.1);
                    collect_trajectory(params, noise, length, &mut r)
                })
                .collect()
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Train one model per dataset layout and sweep the in-context evaluation.
pub fn cartpole_icl_experiment(
    config: &CartpoleIclConfig,
    experiment_id: &str,
) -> Result<CartpoleIclResult> {
    config.validate()?;
    let seed = config.seed;
    let length = config.length;

    // Equal-budget training datasets.
    let spec_one = DatasetSpec {
        scope: ScopeSpec::Original,
        num_envs: 1,
        traj_per_env: config.budget_trajectories,
        length,
    };
    let spec_four = DatasetSpec {
        scope: ScopeSpec::Scope1Plus2,
        num_envs: 4,
        traj_per_env: config.budget_trajectories / 4,
        length,
    };
    let spec_many = DatasetSpec {
        scope: ScopeSpec::Scope1Plus2,
        num_envs: config.many_envs,
        traj_per_env: config.budget_trajectories / config.many_envs,
        length,
    };
    let data_one = build_dataset(&spec_one, rng::derive(seed, &[1]))?;
    let data_four = build_dataset(&spec_four, rng::derive(seed, &[2]))?;
    let data_many = build_dataset(&spec_many, rng::derive(seed, &[3]))?;
    debug_assert_eq!(spec_one.total_steps(), spec_four.total_steps());
    debug_assert_eq!(spec_one.total_steps(), spec_many.total_steps());

    // Shared standardization from the broadest training set.
    let stats = DimStats::from_trajectories(&data_many.trajectories)?;

    // Evaluation sets: fresh trajectories on seen envs, fresh envs otherwise.
    let seen_many_envs: Vec<CartPoleParams> = {
        let step = (data_many.envs.len().max(1) as f64 / config.eval_envs as f64).max(1.0);
        (0..config.eval_envs.min(data_many.envs.len()))
            .map(|i| data_many.envs[(i as f64 * step) as usize])
            .collect()
    };
    let mut scope_rng = rng::rng_at(seed, &[4]);
    let scope1_envs: Vec<CartPoleParams> =
        (0..config.eval_envs).map(|_| sample_params(ScopeSpec::Scope1, &mut scope_rng)).collect();
    let scope2_envs: Vec<CartPoleParams> = (0..config.eval_envs)
        .map(|_| sample_params(ScopeSpec::Scope1Plus2Excl1, &mut scope_rng))
        .collect();

    let mut eval_sets = Vec::new();
    let set_defs: Vec<(&str, Vec<CartPoleParams>, usize, u64)> = vec![
        ("seen_one", data_one.envs.clone(), 4 * config.eval_traj_per_env, 5),
        ("seen_four", data_four.envs.clone(), 4 * config.eval_traj_per_env, 6),
        ("seen_many", seen_many_envs, config.eval_traj_per_env, 7),
        ("scope1", scope1_envs, config.eval_traj_per_env, 8),
        ("scope2_excl1", scope2_envs, config.eval_traj_per_env, 9),
    ];
    for (name, envs, traj_per_env, tag) in set_defs {
        let trajs =
            collect_eval_trajectories(&envs, traj_per_env, length, rng::derive(seed, &[tag]))?;
        eval_sets.push(EvalSet {
            name: name.to_string(),
            envs,
            per_env: trajs
                .iter()
                .map(|group| group.iter().map(|t| stats.standardize(t)).collect())
                .collect(),
        });
    }

    // Train the comparison models.
    let to_sequences = |d: &Dataset| -> Vec<Sequence> {
        d.trajectories.iter().map(|t| stats.standardize(t)).collect()
    };
    let mut models: Vec<(String, GsaModel)> = Vec::new();
    let mut curves: Vec<(String, Vec<EpochStats>)> = Vec::new();
    let jobs: Vec<(&str, &Dataset, usize)> = vec![
        ("one_env", &data_one, config.train.epochs),
        ("four_envs", &data_four, config.train.epochs),
        ("many_envs", &data_many, config.train.epochs),
        (
            "four_envs_early",
            &data_four,
            ((config.train.epochs as f64 * config.early_fraction).round() as usize).max(1),
        ),
    ];
    for (name, dataset, epochs) in jobs {
        let sequences = to_sequences(dataset);
        let mut model = GsaModel::new(config.model.clone(), rng::derive(seed, &[10, hash_name(name)]))?;
        let mut tc = config.train.to_train_config(rng::derive(seed, &[11, hash_name(name)]));
        tc.epochs = epochs;
        let curve = train(&mut model, &sequences, &tc)?;
        curves.push((name.to_string(), curve));
        models.push((name.to_string(), model));
    }

    // Evaluate every model on every set, per environment.
    let seen_of = |model_name: &str, set_name: &str| -> bool {
        matches!(
            (model_name, set_name),
            ("one_env", "seen_one")
                | ("four_envs", "seen_four")
                | ("four_envs_early", "seen_four")
                | ("many_envs", "seen_many")
        )
    };
    let mut rows: Vec<ReportRow> = Vec::new();
    for (model_name, model) in &models {
        for set in &eval_sets {
            let per_env: Vec<Vec<ReportRow>> = set
                .per_env
                .par_iter()
                .enumerate()
                .map(|(ei, seqs)| -> Result<Vec<ReportRow>> {
                    let table = evaluate_icl(model, seqs, &config.t_grid, &config.k_list)?;
                    Ok(table
                        .cells
                        .iter()
                        .filter(|c| c.sequences > 0)
                        .map(|c| ReportRow {
                            experiment_id: experiment_id.to_string(),
                            model_id: model_name.clone(),
                            t: c.t as u64,
                            k: Some(c.k as u64),
                            metric: format!("std_mse/{}", set.name),
                            value: c.mse,
                            trial: ei as u64,
                            seen: Some(seen_of(model_name, &set.name)),
                        })
                        .collect())
                })
                .collect::<Result<_>>()?;
            rows.extend(per_env.into_iter().flatten());
        }
    }

    let summary = build_summary(config, &rows)?;
    Ok(CartpoleIclResult { rows, summary, models, curves, stats, eval_sets })
}

fn hash_name(name: &str) -> u64 {
    name.bytes().fold(0xcbf29ce484222325u64, |acc, b| {
        (acc ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

/// Median error per (model, set, T) at the smallest k, plus the derived
/// comparison quantities.
fn build_summary(config: &CartpoleIclConfig, rows: &[ReportRow]) -> Result<serde_json::Value> {
    let k_min = *config.k_list.iter().min().unwrap() as u64;
    let med = |model: &str, set: &str, t: usize| -> f64 {
        median(
            rows.iter()
                .filter(|r| {
                    r.model_id == model
                        && r.metric == format!("std_mse/{set}")
                        && r.t == t as u64
                        && r.k == Some(k_min)
                })
                .map(|r| r.value)
                .collect(),
        )
    };
    let t_lo = *config.t_grid.iter().min().unwrap();
    let t_hi = *config.t_grid.iter().max().unwrap();

    let one_lo = med("one_env", "scope1", t_lo);
    let one_hi = med("one_env", "scope1", t_hi);
    let many_lo = med("many_envs", "scope1", t_lo);
    let many_hi = med("many_envs", "scope1", t_hi);
    let gap_four = med("four_envs", "scope1", t_hi) - med("four_envs", "seen_four", t_hi);
    let gap_many = med("many_envs", "scope1", t_hi) - med("many_envs", "seen_many", t_hi);

    let overtake_t = config
        .t_grid
        .iter()
        .find(|&&t| med("many_envs", "scope1", t) < med("four_envs", "scope1", t))
        .copied();

    let per_cell: Vec<serde_json::Value> = {
        let mut models: Vec<&str> = rows.iter().map(|r| r.model_id.as_str()).collect();
        models.sort_unstable();
        models.dedup();
        let mut sets: Vec<&str> = rows
            .iter()
            .filter_map(|r| r.metric.strip_prefix("std_mse/"))
            .collect();
        sets.sort_unstable();
        sets.dedup();
        let mut cells = Vec::new();
        for m in &models {
            for s in &sets {
                for &t in &config.t_grid {
                    cells.push(serde_json::json!({
                        "model": m, "set": s, "T": t, "k": k_min,
                        "median_std_mse": med(m, s, t),
                    }));
                }
            }
        }
        cells
    };

    Ok(serde_json::json!({
        "t_lo": t_lo,
        "t_hi": t_hi,
        "one_env_unseen_ratio": one_hi / one_lo,
        "many_envs_scope1_ratio": many_hi / many_lo,
        "gap_four_envs": gap_four,
        "gap_many_envs": gap_many,
        "early_vs_final_four_unseen": {
            "early": med("four_envs_early", "scope1", t_hi),
            "final": med("four_envs", "scope1", t_hi),
        },
        "many_overtakes_four_at_t": overtake_t,
        "medians": per_cell,
    }))
}
