//! Finite-sample error bounds for the two predictors and their Monte-Carlo
//! verification.
//!
//! For a recognizer over `|E|` stored environments the TV error is bounded by
//!
//! ```text
//! min{ alpha * (|E| - 1) / (3 * sqrt(T)) + best_tv,  worst_tv }
//! ```
//!
//! where `alpha` is the non-uniformity ratio from
//! [`crate::estimators::divergence_stats`] and `best_tv` / `worst_tv` are the
//! smallest / largest TV between any stored model and the target environment.
//!
//! For the count-based environment-learning estimator the bound is
//!
//! ```text
//! sqrt(2 |O||S||A| ln(4|O| / delta)) / sqrt(T)
//! ```
//!
//! with probability `1 - delta`, valid once
//! `T > 4 |S|^2 |A|^2 ln(4|S||A| / delta)`.
//!
//! Natural logarithms throughout. The Hoeffding step behind the second bound
//! also admits a `ln(4|S|/delta)` constant; the implemented bound uses
//! `ln(4|O|/delta)` and the report metadata carries the alternate value for
//! comparison.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};
use crate::estimators::{
    accumulate, divergence_stats, el_predict, er_identify, expected_tv, fit_tabular_model,
    ContextCounts, TabularWorldModel,
};
use crate::rng;
use crate::tabular::{sample_context, ContextMode, DiscreteEnv};

/// Identification-error bound for the recognizer.
pub fn er_bound(alpha: f64, n_envs: usize, t: u64, best_tv: f64, worst_tv: f64) -> f64 {
    let ident = alpha * (n_envs as f64 - 1.0) / (3.0 * (t as f64).sqrt());
    (ident + best_tv).min(worst_tv)
}

/// Environment-complexity bound for the count estimator and whether `t` is
/// in the bound's validity regime.
pub fn el_bound(dims: (usize, usize, usize), delta: f64, t: u64) -> (f64, bool) {
    let (s, a, o) = dims;
    let complexity = (2.0 * (o * s * a) as f64 * (4.0 * o as f64 / delta).ln()).sqrt();
    let value = complexity / (t as f64).sqrt();
    (value, (t as f64) > el_threshold(dims, delta))
}

/// Context length above which the environment-learning bound applies:
/// `4 |S|^2 |A|^2 ln(4|S||A| / delta)`.
pub fn el_threshold(dims: (usize, usize, usize), delta: f64) -> f64 {
    let (s, a, _) = dims;
    let sa = (s * a) as f64;
    4.0 * sa * sa * (4.0 * sa / delta).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    El,
    Er,
}

impl fmt::Display for Predictor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predictor::El => write!(f, "el"),
            Predictor::Er => write!(f, "er"),
        }
    }
}

/// Monte-Carlo configuration for bound verification.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConfig {
    /// Failure probability of the bound.
    pub delta: f64,
    /// Ascending context lengths.
    pub t_grid: Vec<u64>,
    /// Trials per grid point.
    pub trials: usize,
    pub seed: u64,
    /// Samples per environment used to fit the stored models
    /// ("sufficiently optimized" scale).
    #[serde(default = "default_fit_samples")]
    pub fit_samples: usize,
    /// Additive smoothing for the stored models (keeps likelihoods finite).
    #[serde(default = "default_fit_smoothing")]
    pub fit_smoothing: f64,
    /// How trial contexts are drawn. The theory assumes uniform queries;
    /// rollout mode measures how sequential, non-uniform contexts degrade
    /// the empirical errors relative to the same bounds.
    #[serde(default = "default_context_mode")]
    pub context_mode: ContextMode,
}

fn default_context_mode() -> ContextMode {
    ContextMode::UniformQuery
}

fn default_fit_samples() -> usize {
    100_000
}

fn default_fit_smoothing() -> f64 {
    1.0
}

impl BoundConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config("delta must lie in (0,1)".into()));
        }
        if self.t_grid.is_empty() || self.t_grid[0] == 0 {
            return Err(Error::Config("t_grid must be nonempty and positive".into()));
        }
        if !self.t_grid.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("t_grid must be strictly ascending".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be positive".into()));
        }
        if self.fit_smoothing < 0.0 {
            return Err(Error::Config("fit_smoothing must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Which environment the contexts are drawn from.
#[derive(Debug, Clone)]
pub enum Target {
    /// An environment of the training family, by index.
    Seen(usize),
    /// A held-out environment.
    Holdout(DiscreteEnv),
}

/// One `(predictor, T, trial)` measurement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRow {
    pub predictor: Predictor,
    pub t: u64,
    pub trial: usize,
    pub empirical_tv: f64,
    pub bound: f64,
    pub valid: bool,
    pub violated: bool,
}

/// Per-T aggregate of the trial rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TSummary {
    pub t: u64,
    pub el_median_tv: f64,
    pub er_median_tv: f64,
    pub el_bound: f64,
    pub el_valid: bool,
    pub er_bound: f64,
    /// Fraction of trials violating the EL bound; counted only in the
    /// valid-T regime, NaN otherwise.
    pub el_violation_rate: f64,
    pub er_violation_rate: f64,
}

/// Full verification output: metadata, per-trial rows, per-T summaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub dims: (usize, usize, usize),
    pub n_envs: usize,
    pub delta: f64,
    pub seed: u64,
    pub alpha: f64,
    pub alpha_degenerate: bool,
    pub best_tv: f64,
    pub worst_tv: f64,
    pub seen_target: bool,
    pub el_threshold: f64,
    /// The bound as implemented uses `ln(4|O|/delta)`; this carries the
    /// alternate `ln(4|S|/delta)` complexity constant for comparison.
    pub el_complexity_alt_log_s: f64,
    pub rows: Vec<TrialRow>,
    pub per_t: Vec<TSummary>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Fit one stored model per family environment from a large uniform-query
/// context, deterministic in `seed`.
pub fn fit_family_models(
    family: &[DiscreteEnv],
    fit_samples: usize,
    smoothing: f64,
    seed: u64,
) -> Result<Vec<TabularWorldModel>> {
    family
        .par_iter()
        .enumerate()
        .map(|(i, env)| {
            let mut r = rng::rng_at(seed, &[0xf17, i as u64]);
            let ctx = sample_context(env, fit_samples, ContextMode::UniformQuery, &mut r)?;
            fit_tabular_model(&[ctx], (env.num_states, env.num_actions, env.num_obs), smoothing)
        })
        .collect()
}

/// Monte-Carlo verification of both bounds against a target environment.
///
/// For each `(T, trial)` a fresh uniform-query context is drawn from the
/// target; the EL estimate (raw ratios, uniform fallback) and the ER
/// argmax-recognizer prediction are scored by mean TV against the target's
/// true transition distribution and compared to their bounds. Trials carry
/// derived seeds, so the report is reproducible bit-for-bit and independent
/// of thread count.
pub fn verify_bound_montecarlo(
    family: &[DiscreteEnv],
    target: &Target,
    config: &BoundConfig,
) -> Result<BoundReport> {
    config.validate()?;
    if family.is_empty() {
        return Err(Error::Config("family must be nonempty".into()));
    }
    let models = fit_family_models(family, config.fit_samples, config.fit_smoothing, config.seed)?;
    let stats = divergence_stats(&models)?;

    let (target_env, seen_target) = match target {
        Target::Seen(i) => {
            let env = family
                .get(*i)
                .ok_or_else(|| Error::Config(format!("seen target index {i} out of range")))?;
            (env.clone(), true)
        }
        Target::Holdout(env) => {
            env.validate()?;
            (env.clone(), false)
        }
    };
    let dims = (target_env.num_states, target_env.num_actions, target_env.num_obs);

    let matching_tvs: Vec<f64> = models
        .iter()
        .map(|m| expected_tv(|s, a| Ok(m.row(s, a).to_vec()), &target_env))
        .collect::<Result<_>>()?;
    let best_tv = matching_tvs.iter().cloned().fold(f64::INFINITY, f64::min);
    let worst_tv = matching_tvs.iter().cloned().fold(0.0f64, f64::max);

    let jobs: Vec<(u64, usize)> = config
        .t_grid
        .iter()
        .flat_map(|&t| (0..config.trials).map(move |trial| (t, trial)))
        .collect();

    let row_pairs: Vec<[TrialRow; 2]> = jobs
        .par_iter()
        .map(|&(t, trial)| -> Result<[TrialRow; 2]> {
            let mut r = rng::rng_at(config.seed, &[0x7121, t, trial as u64]);
            let ctx = sample_context(&target_env, t as usize, config.context_mode, &mut r)?;

            let mut counts = ContextCounts::for_env(&target_env);
            accumulate(&mut counts, &ctx)?;
            let el_tv = expected_tv(|s, a| el_predict(&counts, s, a, 0.0), &target_env)?;
            let (el_b, el_valid) = el_bound(dims, config.delta, t);

            let (pick, _) = er_identify(&models, &ctx)?;
            let er_tv = expected_tv(|s, a| Ok(models[pick].row(s, a).to_vec()), &target_env)?;
            let er_b = er_bound(stats.alpha, family.len(), t, best_tv, worst_tv);

            Ok([
                TrialRow {
                    predictor: Predictor::El,
                    t,
                    trial,
                    empirical_tv: el_tv,
                    bound: el_b,
                    valid: el_valid,
                    violated: el_tv > el_b,
                },
                TrialRow {
                    predictor: Predictor::Er,
                    t,
                    trial,
                    empirical_tv: er_tv,
                    bound: er_b,
                    valid: true,
                    violated: er_tv > er_b,
                },
            ])
        })
        .collect::<Result<_>>()?;
    let rows: Vec<TrialRow> = row_pairs.into_iter().flatten().collect();

    let per_t = config
        .t_grid
        .iter()
        .map(|&t| {
            let mut el: Vec<f64> = Vec::new();
            let mut er: Vec<f64> = Vec::new();
            let mut el_viol = 0usize;
            let mut er_viol = 0usize;
            let mut el_valid = false;
            let mut el_b = f64::NAN;
            let mut er_b = f64::NAN;
            for row in rows.iter().filter(|r| r.t == t) {
                match row.predictor {
                    Predictor::El => {
                        el.push(row.empirical_tv);
                        el_valid = row.valid;
                        el_b = row.bound;
                        if row.violated {
                            el_viol += 1;
                        }
                    }
                    Predictor::Er => {
                        er.push(row.empirical_tv);
                        er_b = row.bound;
                        if row.violated {
                            er_viol += 1;
                        }
                    }
                }
            }
            TSummary {
                t,
                el_median_tv: median(&mut el),
                er_median_tv: median(&mut er),
                el_bound: el_b,
                el_valid,
                er_bound: er_b,
                el_violation_rate: if el_valid {
                    el_viol as f64 / config.trials as f64
                } else {
                    f64::NAN
                },
                er_violation_rate: er_viol as f64 / config.trials as f64,
            }
        })
        .collect();

    let alt_complexity =
        (2.0 * (dims.0 * dims.1 * dims.2) as f64 * (4.0 * dims.0 as f64 / config.delta).ln()).sqrt();
    Ok(BoundReport {
        dims,
        n_envs: family.len(),
        delta: config.delta,
        seed: config.seed,
        alpha: stats.alpha,
        alpha_degenerate: stats.degenerate,
        best_tv,
        worst_tv,
        seen_target,
        el_threshold: el_threshold(dims, config.delta),
        el_complexity_alt_log_s: alt_complexity,
        rows,
        per_t,
    })
}

/// Least-squares slope of `ln(median TV)` against `ln T` over a T range.
pub fn fit_decay_slope(
    report: &BoundReport,
    predictor: Predictor,
    t_range: (u64, u64),
) -> Result<f64> {
    let points: Vec<(f64, f64)> = report
        .per_t
        .iter()
        .filter(|s| s.t >= t_range.0 && s.t <= t_range.1)
        .filter_map(|s| {
            let m = match predictor {
                Predictor::El => s.el_median_tv,
                Predictor::Er => s.er_median_tv,
            };
            (m > 0.0).then(|| ((s.t as f64).ln(), m.ln()))
        })
        .collect();
    slope_of(&points)
}

/// Slope of a least-squares line; errors with fewer than 3 usable points.
pub fn slope_of(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "decay fit needs >= 3 points with positive median TV, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Ok(sxy / sxx)
}

/// Sweep configuration for the EL-vs-ER crossover scan.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossoverConfig {
    pub n_envs_list: Vec<usize>,
    pub dims_list: Vec<(usize, usize, usize)>,
    pub t_grid: Vec<u64>,
    pub trials: usize,
    pub concentration: f64,
    pub seed: u64,
    #[serde(default = "default_fit_samples")]
    pub fit_samples: usize,
    /// Holdout environments are resampled until their best-matching TV
    /// reaches this floor (0 disables).
    #[serde(default)]
    pub min_best_tv: f64,
}

impl CrossoverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_envs_list.is_empty() || self.dims_list.is_empty() || self.t_grid.is_empty() {
            return Err(Error::Config("crossover sweep must be nonempty".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be positive".into()));
        }
        if !(self.concentration > 0.0) {
            return Err(Error::Config("concentration must be > 0".into()));
        }
        Ok(())
    }
}

/// Crossover result for one sweep cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossoverCell {
    pub n_envs: usize,
    pub dims: (usize, usize, usize),
    pub best_tv_holdout: f64,
    /// Smallest T at which median EL error drops below median ER error on a
    /// held-out environment.
    pub crossover_t_unseen: Option<u64>,
    /// Same comparison when the context comes from a training environment.
    pub crossover_t_seen: Option<u64>,
    pub t_grid: Vec<u64>,
    pub el_median_unseen: Vec<f64>,
    pub er_median_unseen: Vec<f64>,
    pub el_median_seen: Vec<f64>,
    pub er_median_seen: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossoverReport {
    pub seed: u64,
    pub cells: Vec<CrossoverCell>,
}

/// Median EL/ER errors over the T grid for contexts from `target`.
fn median_errors_for(
    models: &[TabularWorldModel],
    target: &DiscreteEnv,
    t_grid: &[u64],
    trials: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let jobs: Vec<(usize, usize)> = (0..t_grid.len())
        .flat_map(|ti| (0..trials).map(move |trial| (ti, trial)))
        .collect();
    let measured: Vec<(f64, f64)> = jobs
        .par_iter()
        .map(|&(ti, trial)| -> Result<(f64, f64)> {
            let t = t_grid[ti] as usize;
            let mut r = rng::rng_at(seed, &[0xc05, ti as u64, trial as u64]);
            let ctx = sample_context(target, t, ContextMode::UniformQuery, &mut r)?;
            let mut counts = ContextCounts::for_env(target);
            accumulate(&mut counts, &ctx)?;
            let el_tv = expected_tv(|s, a| el_predict(&counts, s, a, 0.0), target)?;
            let (pick, _) = er_identify(models, &ctx)?;
            let er_tv = expected_tv(|s, a| Ok(models[pick].row(s, a).to_vec()), target)?;
            Ok((el_tv, er_tv))
        })
        .collect::<Result<_>>()?;
    let mut el_medians = Vec::with_capacity(t_grid.len());
    let mut er_medians = Vec::with_capacity(t_grid.len());
    for ti in 0..t_grid.len() {
        let mut el: Vec<f64> = (0..trials).map(|tr| measured[ti * trials + tr].0).collect();
        let mut er: Vec<f64> = (0..trials).map(|tr| measured[ti * trials + tr].1).collect();
        el_medians.push(median(&mut el));
        er_medians.push(median(&mut er));
    }
    Ok((el_medians, er_medians))
}

/// For each sweep cell, find the smallest context length at which the
/// environment-learning estimator's median error drops below the
/// recognizer's, on a held-out environment and on a seen one.
pub fn crossover_scan(config: &CrossoverConfig) -> Result<CrossoverReport> {
    config.validate()?;
    let mut cells = Vec::new();
    for (ci, &n_envs) in config.n_envs_list.iter().enumerate() {
        for (di, &dims) in config.dims_list.iter().enumerate() {
            let cell_seed = rng::derive(config.seed, &[ci as u64, di as u64]);
            let fam_cfg = crate::tabular::EnvFamilyConfig {
                count: n_envs,
                dims,
                concentration: config.concentration,
                determinism_fraction: 0.0,
                kind: crate::tabular::EnvKind::Mdp,
                seed: cell_seed,
            };
            let family = crate::tabular::sample_env_family(&fam_cfg)?;
            let models = fit_family_models(&family, config.fit_samples, 1.0, cell_seed)?;

            // Holdout with enough separation from the family.
            let mut holdout = None;
            let mut best_tv = 0.0;
            for attempt in 0..64u64 {
                let h_cfg = crate::tabular::EnvFamilyConfig {
                    count: 1,
                    seed: rng::derive(cell_seed, &[0x401d, attempt]),
                    ..fam_cfg.clone()
                };
                let env = crate::tabular::sample_env_family(&h_cfg)?.remove(0);
                let tvs: Vec<f64> = models
                    .iter()
                    .map(|m| expected_tv(|s, a| Ok(m.row(s, a).to_vec()), &env))
                    .collect::<Result<_>>()?;
                best_tv = tvs.iter().cloned().fold(f64::INFINITY, f64::min);
                if best_tv >= config.min_best_tv {
                    holdout = Some(env);
                    break;
                }
            }
            let holdout = holdout.ok_or_else(|| {
                Error::Numerical(format!(
                    "could not sample a holdout with best-matching TV >= {}",
                    config.min_best_tv
                ))
            })?;

            let (el_u, er_u) = median_errors_for(
                &models,
                &holdout,
                &config.t_grid,
                config.trials,
                rng::derive(cell_seed, &[1]),
            )?;
            let (el_s, er_s) = median_errors_for(
                &models,
                &family[0],
                &config.t_grid,
                config.trials,
                rng::derive(cell_seed, &[2]),
            )?;
            let first_below = |el: &[f64], er: &[f64]| {
                config
                    .t_grid
                    .iter()
                    .zip(el.iter().zip(er))
                    .find(|(_, (e, r))| e < r)
                    .map(|(&t, _)| t)
            };
            cells.push(CrossoverCell {
                n_envs,
                dims,
                best_tv_holdout: best_tv,
                crossover_t_unseen: first_below(&el_u, &er_u),
                crossover_t_seen: first_below(&el_s, &er_s),
                t_grid: config.t_grid.clone(),
                el_median_unseen: el_u,
                er_median_unseen: er_u,
                el_median_seen: el_s,
                er_median_seen: er_s,
            });
        }
    }
    Ok(CrossoverReport { seed: config.seed, cells })
}

/// Write the per-trial rows as CSV with the fixed column order
/// `predictor,T,trial,empirical_tv,bound,valid,violated`.
pub fn write_report_csv<W: std::io::Write>(report: &BoundReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["predictor", "T", "trial", "empirical_tv", "bound", "valid", "violated"])?;
    for row in &report.rows {
        w.write_record(&[
            row.predictor.to_string(),
            row.t.to_string(),
            row.trial.to_string(),
            format_float(row.empirical_tv),
            format_float(row.bound),
            row.valid.to_string(),
            row.violated.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest round-trip decimal rendering (ryu, via the JSON serializer).
pub fn format_float(x: f64) -> String {
    serde_json::to_string(&x).unwrap_or_else(|_| x.to_string())
}

/// Summary JSON next to the CSV: bounds metadata, per-T aggregates, decay
/// slopes where fittable.
pub fn report_summary_json(report: &BoundReport) -> serde_json::Value {
    let full_range = (
        report.per_t.first().map(|s| s.t).unwrap_or(1),
        report.per_t.last().map(|s| s.t).unwrap_or(1),
    );
    let slope_el = fit_decay_slope(report, Predictor::El, full_range).ok();
    let slope_er = fit_decay_slope(report, Predictor::Er, full_range).ok();
    serde_json::json!({
        "dims": report.dims,
        "n_envs": report.n_envs,
        "delta": report.delta,
        "seed": report.seed,
        "alpha": report.alpha,
        "alpha_degenerate": report.alpha_degenerate,
        "best_tv": report.best_tv,
        "worst_tv": report.worst_tv,
        "seen_target": report.seen_target,
        "el_threshold": report.el_threshold,
        "el_complexity_alt_log_s": report.el_complexity_alt_log_s,
        "slopes": { "el": slope_el, "er": slope_er },
        "per_t": report.per_t,
    })
}
