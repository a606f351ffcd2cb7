//! Count-based in-context predictors over discrete contexts.
//!
//! Two mechanisms are implemented side by side:
//!
//! * **Environment learning (EL)** estimates the active environment's
//!   transition law directly from context count statistics, ignoring any
//!   stored environments.
//! * **Environment recognition (ER)** holds one fitted model per training
//!   environment and uses the context only to decide which one is active,
//!   either by likelihood argmax or by posterior mixture.
//!
//! Divergence statistics between stored models (mean KL, max KL, and their
//! non-uniformity ratio) feed the identification-error bound in
//! [`crate::bounds`].
//!
//! All operations are pure given their inputs; counts and models are value
//! types safe to send between threads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tabular::{check_belief, DiscreteContext, DiscreteEnv};

/// Count statistics `n(s,a)` and `n(s,a,o')` accumulated over contexts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextCounts {
    pub num_states: usize,
    pub num_actions: usize,
    pub num_obs: usize,
    /// Flattened `|S| x |A|`.
    pub n_sa: Vec<u64>,
    /// Flattened `|S| x |A| x |O|`.
    pub n_sao: Vec<u64>,
    pub total: u64,
}

impl ContextCounts {
    pub fn new(num_states: usize, num_actions: usize, num_obs: usize) -> Self {
        ContextCounts {
            num_states,
            num_actions,
            num_obs,
            n_sa: vec![0; num_states * num_actions],
            n_sao: vec![0; num_states * num_actions * num_obs],
            total: 0,
        }
    }

    pub fn for_env(env: &DiscreteEnv) -> Self {
        Self::new(env.num_states, env.num_actions, env.num_obs)
    }

    #[inline]
    fn sa(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    #[inline]
    fn sao(&self, s: usize, a: usize, o: usize) -> usize {
        (s * self.num_actions + a) * self.num_obs + o
    }

    pub fn count_sa(&self, s: usize, a: usize) -> u64 {
        self.n_sa[self.sa(s, a)]
    }

    pub fn count_sao(&self, s: usize, a: usize, o: usize) -> u64 {
        self.n_sao[self.sao(s, a, o)]
    }

    /// Add one record. Streaming single-record accumulation and batch
    /// [`accumulate`] agree exactly.
    pub fn push(&mut self, s: usize, a: usize, o_next: usize) -> Result<()> {
        if s >= self.num_states || a >= self.num_actions || o_next >= self.num_obs {
            return Err(Error::Contract(format!(
                "record out of range: ({s}, {a}, {o_next}) vs dims ({}, {}, {})",
                self.num_states, self.num_actions, self.num_obs
            )));
        }
        let i_sa = self.sa(s, a);
        let i_sao = self.sao(s, a, o_next);
        self.n_sa[i_sa] += 1;
        self.n_sao[i_sao] += 1;
        self.total += 1;
        Ok(())
    }

    /// Consistency of the two tables and the total.
    pub fn validate(&self) -> Result<()> {
        let mut total = 0u64;
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let row_sum: u64 = (0..self.num_obs).map(|o| self.count_sao(s, a, o)).sum();
                if row_sum != self.count_sa(s, a) {
                    return Err(Error::Contract("n_sao rows do not sum to n_sa".into()));
                }
                total += row_sum;
            }
        }
        if total != self.total {
            return Err(Error::Contract("total does not match table sums".into()));
        }
        Ok(())
    }
}

/// Fold a whole context into the counts.
pub fn accumulate(counts: &mut ContextCounts, context: &DiscreteContext) -> Result<()> {
    for rec in &context.records {
        counts.push(rec.state, rec.action, rec.obs_next)?;
    }
    Ok(())
}

/// The environment-learning estimate at query `(s, a)`:
/// `(n(s,a,o') + smoothing) / (n(s,a) + smoothing * |O|)`.
///
/// With zero counts and zero smoothing the fallback is the uniform
/// distribution over observations.
pub fn el_predict(counts: &ContextCounts, s: usize, a: usize, smoothing: f64) -> Result<Vec<f64>> {
    if smoothing < 0.0 {
        return Err(Error::Config("smoothing must be nonnegative".into()));
    }
    if s >= counts.num_states || a >= counts.num_actions {
        return Err(Error::Contract(format!("query ({s}, {a}) out of range")));
    }
    let n = counts.count_sa(s, a) as f64;
    let o_dim = counts.num_obs;
    let denom = n + smoothing * o_dim as f64;
    if denom == 0.0 {
        return Ok(vec![1.0 / o_dim as f64; o_dim]);
    }
    Ok((0..o_dim)
        .map(|o| (counts.count_sao(s, a, o) as f64 + smoothing) / denom)
        .collect())
}

/// Belief-weighted environment-learning estimate for partially observed
/// queries: numerator `Σ_s b(s) n(s,a,o')`, denominator `Σ_s b(s) n(s,a)`,
/// with the same smoothing fallback as [`el_predict`]. The belief comes from
/// an exact filter (see [`DiscreteEnv::filter_belief`]), realizing ideal
/// state estimation.
pub fn el_predict_pomdp(
    counts: &ContextCounts,
    belief: &[f64],
    a: usize,
    smoothing: f64,
) -> Result<Vec<f64>> {
    if smoothing < 0.0 {
        return Err(Error::Config("smoothing must be nonnegative".into()));
    }
    check_belief(belief, counts.num_states)?;
    if a >= counts.num_actions {
        return Err(Error::Contract(format!("action {a} out of range")));
    }
    let o_dim = counts.num_obs;
    let mut num = vec![0.0; o_dim];
    let mut den = 0.0;
    for (s, &b) in belief.iter().enumerate() {
        if b == 0.0 {
            continue;
        }
        den += b * counts.count_sa(s, a) as f64;
        for (o, n) in num.iter_mut().enumerate() {
            *n += b * counts.count_sao(s, a, o) as f64;
        }
    }
    let denom = den + smoothing * o_dim as f64;
    if denom == 0.0 {
        return Ok(vec![1.0 / o_dim as f64; o_dim]);
    }
    Ok(num.iter().map(|&x| (x + smoothing) / denom).collect())
}

/// A fitted per-environment transition table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabularWorldModel {
    pub num_states: usize,
    pub num_actions: usize,
    pub num_obs: usize,
    /// Flattened `|S| x |A|` rows, each a probability vector over `|O|`.
    pub probs: Vec<Vec<f64>>,
    /// Number of samples the fit consumed.
    pub fit_count: u64,
}

impl TabularWorldModel {
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        &self.probs[s * self.num_actions + a]
    }
}

/// Maximum-likelihood (smoothed) fit of a transition table from contexts.
pub fn fit_tabular_model(
    contexts: &[DiscreteContext],
    dims: (usize, usize, usize),
    smoothing: f64,
) -> Result<TabularWorldModel> {
    let (s_dim, a_dim, o_dim) = dims;
    let mut counts = ContextCounts::new(s_dim, a_dim, o_dim);
    for ctx in contexts {
        accumulate(&mut counts, ctx)?;
    }
    fit_from_counts(&counts, smoothing)
}

/// Fit directly from accumulated counts.
pub fn fit_from_counts(counts: &ContextCounts, smoothing: f64) -> Result<TabularWorldModel> {
    if smoothing < 0.0 {
        return Err(Error::Config("smoothing must be nonnegative".into()));
    }
    if counts.total == 0 && smoothing == 0.0 {
        return Err(Error::Numerical(
            "degenerate fit: no data and zero smoothing".into(),
        ));
    }
    let mut probs = Vec::with_capacity(counts.num_states * counts.num_actions);
    for s in 0..counts.num_states {
        for a in 0..counts.num_actions {
            probs.push(el_predict(counts, s, a, smoothing)?);
        }
    }
    Ok(TabularWorldModel {
        num_states: counts.num_states,
        num_actions: counts.num_actions,
        num_obs: counts.num_obs,
        probs,
        fit_count: counts.total,
    })
}

/// Log-likelihood of a context under a fitted model:
/// `Σ log p(o' | s, a)`. Empty context gives 0; a zero-probability record
/// yields the `-inf` sentinel.
pub fn context_log_likelihood(model: &TabularWorldModel, context: &DiscreteContext) -> f64 {
    let mut ll = 0.0;
    for rec in &context.records {
        let p = model.row(rec.state, rec.action)[rec.obs_next];
        if p <= 0.0 {
            return f64::NEG_INFINITY;
        }
        ll += p.ln();
    }
    ll
}

/// Likelihood-argmax environment recognizer. Ties break to the lowest index.
pub fn er_identify(
    models: &[TabularWorldModel],
    context: &DiscreteContext,
) -> Result<(usize, Vec<f64>)> {
    if models.is_empty() {
        return Err(Error::Contract("er_identify requires at least one model".into()));
    }
    let lls: Vec<f64> = models.iter().map(|m| context_log_likelihood(m, context)).collect();
    let mut best = 0usize;
    for (i, &ll) in lls.iter().enumerate().skip(1) {
        if ll > lls[best] {
            best = i;
        }
    }
    Ok((best, lls))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecognitionMode {
    /// Predict with the single most likely stored environment.
    Argmax,
    /// Posterior-weighted average over stored environments.
    Mixture,
}

/// Environment-recognition prediction at query `(s, a)`.
///
/// `Mixture` weighs each model row by `prior(e) * p_e(context)`, computed in
/// log-space with max-subtraction. `prior = None` means uniform.
pub fn er_predict(
    models: &[TabularWorldModel],
    context: &DiscreteContext,
    s: usize,
    a: usize,
    mode: RecognitionMode,
    prior: Option<&[f64]>,
) -> Result<Vec<f64>> {
    match mode {
        RecognitionMode::Argmax => {
            let (best, _) = er_identify(models, context)?;
            Ok(models[best].row(s, a).to_vec())
        }
        RecognitionMode::Mixture => {
            let weights = posterior_weights(models, context, prior)?;
            let o_dim = models[0].num_obs;
            let mut out = vec![0.0; o_dim];
            for (m, &w) in models.iter().zip(&weights) {
                for (acc, &p) in out.iter_mut().zip(m.row(s, a)) {
                    *acc += w * p;
                }
            }
            Ok(out)
        }
    }
}

/// Normalized posterior over stored environments given a context.
pub fn posterior_weights(
    models: &[TabularWorldModel],
    context: &DiscreteContext,
    prior: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if models.is_empty() {
        return Err(Error::Contract("posterior requires at least one model".into()));
    }
    let n = models.len();
    let prior_vec: Vec<f64> = match prior {
        Some(p) => {
            if p.len() != n {
                return Err(Error::Contract("prior length mismatch".into()));
            }
            let sum: f64 = p.iter().sum();
            if p.iter().any(|&x| x < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!("prior not normalized (sum={sum})")));
            }
            p.to_vec()
        }
        None => vec![1.0 / n as f64; n],
    };
    let log_post: Vec<f64> = models
        .iter()
        .zip(&prior_vec)
        .map(|(m, &pr)| {
            if pr == 0.0 {
                f64::NEG_INFINITY
            } else {
                pr.ln() + context_log_likelihood(m, context)
            }
        })
        .collect();
    let max = log_post.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        // Context impossible under every model: fall back to the prior.
        return Ok(prior_vec);
    }
    let mut w: Vec<f64> = log_post.iter().map(|&lp| (lp - max).exp()).collect();
    let z: f64 = w.iter().sum();
    for x in &mut w {
        *x /= z;
    }
    Ok(w)
}

/// Total-variation distance: half the L1 distance between two distributions.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Contract(format!(
            "tv_distance length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Mean TV between a predictor and the environment's true next-observation
/// distribution, averaged uniformly over all `(s, a)` queries.
pub fn expected_tv<F>(mut predictor: F, env: &DiscreteEnv) -> Result<f64>
where
    F: FnMut(usize, usize) -> Result<Vec<f64>>,
{
    let mut sum = 0.0;
    for s in 0..env.num_states {
        for a in 0..env.num_actions {
            let pred = predictor(s, a)?;
            let truth = env.true_transition_dist(s, a);
            sum += tv_distance(&pred, &truth)?;
        }
    }
    Ok(sum / (env.num_states * env.num_actions) as f64)
}

/// KL divergence in nats; both rows must be strictly positive wherever the
/// first has mass.
fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| if a == 0.0 { 0.0 } else { a * (a / b).ln() })
        .sum()
}

/// Pairwise divergence structure of a model set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DivergenceStats {
    /// `delta[i][j]` = mean over uniform queries of `KL(row_i || row_j)`.
    pub delta: Vec<Vec<f64>>,
    /// `kappa[i][j]` = max over queries of the same KL.
    pub kappa: Vec<Vec<f64>>,
    /// Max over ordered pairs with `delta > 0` of `sqrt(kappa / delta)`;
    /// reported as 1 with `degenerate = true` when every pair is identical.
    pub alpha: f64,
    pub degenerate: bool,
    /// For each model, the index of the closest *other* model by `delta`
    /// (argmin over the first argument, matching the recognizer's notion of
    /// nearest stored environment).
    pub best_index: Vec<usize>,
}

/// Compute mean/max KL matrices and the non-uniformity ratio over a model
/// set. Rows must be strictly positive (fit with smoothing).
pub fn divergence_stats(models: &[TabularWorldModel]) -> Result<DivergenceStats> {
    let n = models.len();
    if n == 0 {
        return Err(Error::Contract("divergence_stats requires at least one model".into()));
    }
    for m in models {
        for row in &m.probs {
            if row.iter().any(|&p| p <= 0.0) {
                return Err(Error::Contract(
                    "divergence_stats requires strictly positive rows; fit with smoothing".into(),
                ));
            }
        }
    }
    let queries = models[0].num_states * models[0].num_actions;
    let mut delta = vec![vec![0.0; n]; n];
    let mut kappa = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut mean = 0.0;
            let mut max = 0.0f64;
            for q in 0..queries {
                let d = kl(&models[i].probs[q], &models[j].probs[q]);
                mean += d;
                max = max.max(d);
            }
            delta[i][j] = mean / queries as f64;
            kappa[i][j] = max;
        }
    }
    let mut alpha = 1.0f64;
    let mut any_positive = false;
    for i in 0..n {
        for j in 0..n {
            if i != j && delta[i][j] > 0.0 {
                any_positive = true;
                alpha = alpha.max((kappa[i][j] / delta[i][j]).sqrt());
            }
        }
    }
    let best_index = (0..n)
        .map(|i| {
            let mut best = if i == 0 { 1 % n.max(1) } else { 0 };
            for j in 0..n {
                if j != i && delta[j][i] < delta[best][i] {
                    best = j;
                }
            }
            best
        })
        .collect();
    Ok(DivergenceStats {
        delta,
        kappa,
        alpha,
        degenerate: !any_positive,
        best_index,
    })
}

/// Serialized model document, same table convention as environments.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelSetDoc {
    pub format_version: u32,
    pub dims: (usize, usize, usize),
    pub models: Vec<ModelDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelDoc {
    pub probs: Vec<f64>,
    pub fit_count: u64,
}

pub const MODEL_SET_FORMAT_VERSION: u32 = 1;

pub fn models_to_doc(models: &[TabularWorldModel]) -> Result<ModelSetDoc> {
    let dims = models
        .first()
        .map(|m| (m.num_states, m.num_actions, m.num_obs))
        .ok_or_else(|| Error::Contract("empty model set".into()))?;
    Ok(ModelSetDoc {
        format_version: MODEL_SET_FORMAT_VERSION,
        dims,
        models: models
            .iter()
            .map(|m| ModelDoc {
                probs: m.probs.iter().flatten().copied().collect(),
                fit_count: m.fit_count,
            })
            .collect(),
    })
}

pub fn models_from_doc(doc: &ModelSetDoc) -> Result<Vec<TabularWorldModel>> {
    if doc.format_version != MODEL_SET_FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported model set format_version {}",
            doc.format_version
        )));
    }
    let (s, a, o) = doc.dims;
    doc.models
        .iter()
        .map(|d| {
            if d.probs.len() != s * a * o {
                return Err(Error::Config("flattened model length mismatch".into()));
            }
            Ok(TabularWorldModel {
                num_states: s,
                num_actions: a,
                num_obs: o,
                probs: d.probs.chunks(o).map(<[f64]>::to_vec).collect(),
                fit_count: d.fit_count,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tabular::{
        sample_context, sample_env_family, ContextMode, ContextRecord, EnvFamilyConfig, EnvKind,
    };

    fn ctx(records: Vec<(usize, usize, usize)>) -> DiscreteContext {
        DiscreteContext {
            records: records
                .into_iter()
                .map(|(state, action, obs_next)| ContextRecord { state, action, obs_next })
                .collect(),
            mode: ContextMode::UniformQuery,
        }
    }

    fn family(count: usize, dims: (usize, usize, usize), seed: u64) -> Vec<crate::tabular::DiscreteEnv> {
        sample_env_family(&EnvFamilyConfig {
            count,
            dims,
            concentration: 1.0,
            determinism_fraction: 0.0,
            kind: EnvKind::Mdp,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn accumulate_trivial_cases() {
        let mut counts = ContextCounts::new(3, 2, 5);
        accumulate(&mut counts, &ctx(vec![])).unwrap();
        assert_eq!(counts.total, 0);
        accumulate(&mut counts, &ctx(vec![(2, 1, 4)])).unwrap();
        assert_eq!(counts.count_sa(2, 1), 1);
        assert_eq!(counts.count_sao(2, 1, 4), 1);
        counts.validate().unwrap();
    }

    #[test]
    fn accumulate_is_additive() {
        let a = ctx(vec![(0, 0, 1), (1, 1, 2), (0, 0, 0)]);
        let b = ctx(vec![(2, 1, 4), (0, 0, 1)]);
        let mut split = ContextCounts::new(3, 2, 5);
        accumulate(&mut split, &a).unwrap();
        accumulate(&mut split, &b).unwrap();
        let mut joined = ContextCounts::new(3, 2, 5);
        let mut all = a.records.clone();
        all.extend(b.records.clone());
        accumulate(&mut joined, &DiscreteContext { records: all, mode: a.mode }).unwrap();
        assert_eq!(split, joined);
    }

    #[test]
    fn accumulate_rejects_out_of_range() {
        let mut counts = ContextCounts::new(2, 2, 2);
        assert!(accumulate(&mut counts, &ctx(vec![(2, 0, 0)])).is_err());
    }

    #[test]
    fn el_predict_ratios() {
        let mut counts = ContextCounts::new(1, 1, 2);
        for _ in 0..3 {
            counts.push(0, 0, 0).unwrap();
        }
        counts.push(0, 0, 1).unwrap();
        assert_eq!(el_predict(&counts, 0, 0, 0.0).unwrap(), vec![0.75, 0.25]);
        // With additive smoothing 1: (3+1)/(4+2), (1+1)/(4+2).
        let sm = el_predict(&counts, 0, 0, 1.0).unwrap();
        assert!((sm[0] - 4.0 / 6.0).abs() < 1e-15);
        assert!((sm[1] - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn el_predict_unseen_query_is_uniform() {
        let counts = ContextCounts::new(2, 2, 4);
        assert_eq!(el_predict(&counts, 1, 1, 0.0).unwrap(), vec![0.25; 4]);
        assert_eq!(el_predict(&counts, 1, 1, 3.0).unwrap(), vec![0.25; 4]);
        assert!(el_predict(&counts, 0, 0, -0.1).is_err());
    }

    #[test]
    fn el_pomdp_one_hot_belief_reduces_to_el() {
        let mut counts = ContextCounts::new(2, 1, 2);
        for _ in 0..4 {
            counts.push(0, 0, 0).unwrap();
        }
        counts.push(1, 0, 1).unwrap();
        let belief = vec![1.0, 0.0];
        assert_eq!(
            el_predict_pomdp(&counts, &belief, 0, 0.0).unwrap(),
            el_predict(&counts, 0, 0, 0.0).unwrap()
        );
    }

    #[test]
    fn el_pomdp_uniform_belief_identical_rows() {
        let mut counts = ContextCounts::new(2, 1, 2);
        for s in 0..2 {
            counts.push(s, 0, 0).unwrap();
            counts.push(s, 0, 0).unwrap();
            counts.push(s, 0, 1).unwrap();
        }
        let mixed = el_predict_pomdp(&counts, &[0.5, 0.5], 0, 0.0).unwrap();
        let row = el_predict(&counts, 0, 0, 0.0).unwrap();
        for (a, b) in mixed.iter().zip(&row) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn el_pomdp_mixes_opposing_rows() {
        let mut counts = ContextCounts::new(2, 1, 2);
        for _ in 0..4 {
            counts.push(0, 0, 0).unwrap();
            counts.push(1, 0, 1).unwrap();
        }
        let out = el_predict_pomdp(&counts, &[0.5, 0.5], 0, 0.0).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-15);
        assert!((out[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn el_pomdp_rejects_unnormalized_belief() {
        let counts = ContextCounts::new(2, 1, 2);
        assert!(el_predict_pomdp(&counts, &[0.7, 0.7], 0, 0.0).is_err());
    }

    #[test]
    fn fit_recovers_deterministic_table() {
        let mut env = family(1, (3, 2, 3), 5).remove(0);
        for row in &mut env.transition {
            let mx = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            row.iter_mut().for_each(|p| *p = 0.0);
            row[mx] = 1.0;
        }
        let mut r = rng::rng_from_seed(9);
        let ctx = sample_context(&env, 500, ContextMode::UniformQuery, &mut r).unwrap();
        let model = fit_tabular_model(&[ctx], (3, 2, 3), 0.0).unwrap();
        for s in 0..3 {
            for a in 0..2 {
                for (p, q) in model.row(s, a).iter().zip(env.transition_row(s, a)) {
                    assert!((p - q).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn fit_no_data_smoothing_one_is_uniform() {
        let model = fit_tabular_model(&[], (2, 2, 4), 1.0).unwrap();
        for row in &model.probs {
            assert_eq!(row, &vec![0.25; 4]);
        }
        assert_eq!(model.fit_count, 0);
    }

    #[test]
    fn fit_no_data_no_smoothing_errors() {
        assert!(matches!(
            fit_tabular_model(&[], (2, 2, 2), 0.0),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn fit_converges_in_tv() {
        let env = &family(1, (2, 1, 2), 11)[0];
        let mut r = rng::rng_from_seed(12);
        let ctx = sample_context(env, 100_000, ContextMode::UniformQuery, &mut r).unwrap();
        let model = fit_tabular_model(&[ctx], (2, 1, 2), 0.0).unwrap();
        for s in 0..2 {
            let tv = tv_distance(model.row(s, 0), env.transition_row(s, 0)).unwrap();
            assert!(tv < 0.01, "tv={tv}");
        }
    }

    #[test]
    fn log_likelihood_cases() {
        let model = TabularWorldModel {
            num_states: 1,
            num_actions: 1,
            num_obs: 2,
            probs: vec![vec![0.5, 0.5]],
            fit_count: 0,
        };
        assert_eq!(context_log_likelihood(&model, &ctx(vec![])), 0.0);
        let single = context_log_likelihood(&model, &ctx(vec![(0, 0, 1)]));
        assert!((single - 0.5f64.ln()).abs() < 1e-15);
        let a = ctx(vec![(0, 0, 0), (0, 0, 1)]);
        let b = ctx(vec![(0, 0, 1)]);
        let mut joined = a.records.clone();
        joined.extend(b.records.clone());
        let j = DiscreteContext { records: joined, mode: a.mode };
        let sum = context_log_likelihood(&model, &a) + context_log_likelihood(&model, &b);
        assert!((context_log_likelihood(&model, &j) - sum).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_gives_neg_infinity() {
        let model = TabularWorldModel {
            num_states: 1,
            num_actions: 1,
            num_obs: 2,
            probs: vec![vec![1.0, 0.0]],
            fit_count: 0,
        };
        assert_eq!(
            context_log_likelihood(&model, &ctx(vec![(0, 0, 1)])),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn er_identify_trivial_and_tie_rules() {
        let m = |p: Vec<f64>| TabularWorldModel {
            num_states: 1,
            num_actions: 1,
            num_obs: 2,
            probs: vec![p],
            fit_count: 0,
        };
        let models = vec![m(vec![0.5, 0.5])];
        assert_eq!(er_identify(&models, &ctx(vec![])).unwrap().0, 0);
        let models = vec![m(vec![0.5, 0.5]), m(vec![0.4, 0.6])];
        // Empty context: all likelihoods 0, ties break to lowest index.
        assert_eq!(er_identify(&models, &ctx(vec![])).unwrap().0, 0);
    }

    #[test]
    fn er_identify_consistent_model_wins() {
        // Two near-deterministic models differing at one query; a context
        // containing that query picks the consistent one.
        let sharp = |hot: usize| {
            let mut row = vec![1e-6; 2];
            row[hot] = 1.0 - 1e-6;
            TabularWorldModel {
                num_states: 1,
                num_actions: 1,
                num_obs: 2,
                probs: vec![row],
                fit_count: 0,
            }
        };
        let models = vec![sharp(0), sharp(1)];
        let (pick, lls) = er_identify(&models, &ctx(vec![(0, 0, 1)])).unwrap();
        assert_eq!(pick, 1);
        assert!(lls[1] > lls[0]);
    }

    #[test]
    fn er_predict_single_model_both_modes() {
        let model = TabularWorldModel {
            num_states: 1,
            num_actions: 1,
            num_obs: 2,
            probs: vec![vec![0.3, 0.7]],
            fit_count: 0,
        };
        let models = vec![model];
        let c = ctx(vec![]);
        for mode in [RecognitionMode::Argmax, RecognitionMode::Mixture] {
            let out = er_predict(&models, &c, 0, 0, mode, None).unwrap();
            assert_eq!(out, vec![0.3, 0.7]);
        }
    }

    #[test]
    fn er_mixture_empty_context_is_prior_average() {
        let m = |p: Vec<f64>| TabularWorldModel {
            num_states: 1,
            num_actions: 1,
            num_obs: 2,
            probs: vec![p],
            fit_count: 0,
        };
        let models = vec![m(vec![1.0, 0.0]), m(vec![0.0, 1.0])];
        let out = er_predict(&models, &ctx(vec![]), 0, 0, RecognitionMode::Mixture, None).unwrap();
        assert_eq!(out, vec![0.5, 0.5]);
    }

    #[test]
    fn er_mixture_matches_direct_arithmetic_posterior() {
        // Brute-force posterior in plain (non-log) arithmetic on a 5-record
        // context, compared against the log-space implementation.
        let envs = family(3, (2, 2, 2), 21);
        let models: Vec<TabularWorldModel> = envs
            .iter()
            .map(|env| {
                let mut r = rng::rng_at(22, &[env.env_id]);
                let c = sample_context(env, 400, ContextMode::UniformQuery, &mut r).unwrap();
                fit_tabular_model(&[c], (2, 2, 2), 1.0).unwrap()
            })
            .collect();
        let mut r = rng::rng_from_seed(23);
        let context = sample_context(&envs[1], 5, ContextMode::UniformQuery, &mut r).unwrap();
        let prior = vec![0.2, 0.5, 0.3];

        let mut direct: Vec<f64> = models
            .iter()
            .zip(&prior)
            .map(|(m, &pr)| {
                let mut p = pr;
                for rec in &context.records {
                    p *= m.row(rec.state, rec.action)[rec.obs_next];
                }
                p
            })
            .collect();
        let z: f64 = direct.iter().sum();
        direct.iter_mut().for_each(|p| *p /= z);

        let fast = posterior_weights(&models, &context, Some(&prior)).unwrap();
        for (a, b) in fast.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }

        let predicted =
            er_predict(&models, &context, 1, 0, RecognitionMode::Mixture, Some(&prior)).unwrap();
        let mut expect = vec![0.0; 2];
        for (m, &w) in models.iter().zip(&direct) {
            for (acc, &p) in expect.iter_mut().zip(m.row(1, 0)) {
                *acc += w * p;
            }
        }
        for (a, b) in predicted.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tv_distance_cases() {
        assert_eq!(tv_distance(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(tv_distance(&[0.5, 0.5], &[0.75, 0.25]).unwrap(), 0.25);
        assert!(tv_distance(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn expected_tv_cases() {
        let env = &family(1, (2, 2, 2), 31)[0];
        let truth = expected_tv(|s, a| Ok(env.true_transition_dist(s, a)), env).unwrap();
        assert_eq!(truth, 0.0);

        // Uniform predictor against a deterministic |O|=4 environment: TV is
        // 1 - 1/4 at every query.
        let mut det = family(1, (4, 1, 4), 32).remove(0);
        for (i, row) in det.transition.iter_mut().enumerate() {
            row.iter_mut().for_each(|p| *p = 0.0);
            row[(i + 1) % 4] = 1.0;
        }
        let uniform = expected_tv(|_, _| Ok(vec![0.25; 4]), &det).unwrap();
        assert!((uniform - 0.75).abs() < 1e-15);
        assert!((0.0..=1.0).contains(&uniform));
    }

    #[test]
    fn divergence_identical_models_degenerate() {
        let m = TabularWorldModel {
            num_states: 2,
            num_actions: 1,
            num_obs: 2,
            probs: vec![vec![0.5, 0.5], vec![0.3, 0.7]],
            fit_count: 0,
        };
        let stats = divergence_stats(&[m.clone(), m]).unwrap();
        assert!(stats.degenerate);
        assert_eq!(stats.alpha, 1.0);
        assert_eq!(stats.delta[0][1], 0.0);
        assert_eq!(stats.kappa[1][0], 0.0);
    }

    #[test]
    fn divergence_single_query_difference_gives_sqrt_sa() {
        // |S| * |A| = 6 queries; models differ at exactly one of them, so
        // kappa equals that KL and delta equals it divided by 6.
        let base = vec![vec![0.5, 0.5]; 6];
        let mut other = base.clone();
        other[2] = vec![0.8, 0.2];
        let mk = |probs: Vec<Vec<f64>>| TabularWorldModel {
            num_states: 3,
            num_actions: 2,
            num_obs: 2,
            probs,
            fit_count: 0,
        };
        let stats = divergence_stats(&[mk(base), mk(other)]).unwrap();
        assert!((stats.alpha - 6.0f64.sqrt()).abs() < 1e-12);
        assert!(!stats.degenerate);
        for i in 0..2 {
            for j in 0..2 {
                assert!(stats.kappa[i][j] >= stats.delta[i][j]);
            }
        }
    }

    #[test]
    fn divergence_requires_positive_rows() {
        let m = TabularWorldModel {
            num_states: 1,
            num_actions: 1,
            num_obs: 2,
            probs: vec![vec![1.0, 0.0]],
            fit_count: 0,
        };
        assert!(divergence_stats(&[m.clone(), m]).is_err());
    }

    #[test]
    fn el_consistency_median_error_decreases() {
        // Median expected TV of the EL estimator is non-increasing over a
        // doubling T grid and approaches 0.
        let env = &family(1, (4, 2, 4), 41)[0];
        let t_grid: Vec<usize> = (4..=12).map(|k| 1usize << k).collect();
        let trials = 60u64;
        let mut medians = Vec::new();
        for (ti, &t) in t_grid.iter().enumerate() {
            let mut tvs: Vec<f64> = (0..trials)
                .map(|trial| {
                    let mut r = rng::rng_at(42, &[ti as u64, trial]);
                    let c = sample_context(env, t, ContextMode::UniformQuery, &mut r).unwrap();
                    let mut counts = ContextCounts::for_env(env);
                    accumulate(&mut counts, &c).unwrap();
                    expected_tv(|s, a| el_predict(&counts, s, a, 0.0), env).unwrap()
                })
                .collect();
            tvs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            medians.push(tvs[trials as usize / 2]);
        }
        for w in medians.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "medians must be non-increasing: {medians:?}");
        }
        assert!(medians.last().unwrap() < &0.05);
    }

    #[test]
    fn er_sufficiency_misidentification_vanishes() {
        let envs = family(4, (4, 2, 4), 51);
        let models: Vec<TabularWorldModel> = envs
            .iter()
            .enumerate()
            .map(|(i, env)| {
                let mut r = rng::rng_at(52, &[i as u64]);
                let c = sample_context(env, 50_000, ContextMode::UniformQuery, &mut r).unwrap();
                fit_tabular_model(&[c], (4, 2, 4), 1.0).unwrap()
            })
            .collect();
        let trials = 100;
        let mut rates = Vec::new();
        for (ti, t) in [4usize, 16, 64, 256, 1024].into_iter().enumerate() {
            let mut wrong = 0;
            for trial in 0..trials {
                let target = trial % envs.len();
                let mut r = rng::rng_at(53, &[ti as u64, trial as u64]);
                let c = sample_context(&envs[target], t, ContextMode::UniformQuery, &mut r).unwrap();
                if er_identify(&models, &c).unwrap().0 != target {
                    wrong += 1;
                }
            }
            rates.push(wrong as f64 / trials as f64);
        }
        for w in rates.windows(2) {
            assert!(w[1] <= w[0] + 0.05, "rates should not increase: {rates:?}");
        }
        assert_eq!(*rates.last().unwrap(), 0.0);
    }

    #[test]
    fn er_error_median_nonincreasing() {
        // The in-context inequality for the recognizer: more context never
        // hurts the median error on a training environment.
        let envs = family(4, (4, 2, 4), 55);
        let models: Vec<TabularWorldModel> = envs
            .iter()
            .enumerate()
            .map(|(i, env)| {
                let mut r = rng::rng_at(56, &[i as u64]);
                let c = sample_context(env, 50_000, ContextMode::UniformQuery, &mut r).unwrap();
                fit_tabular_model(&[c], (4, 2, 4), 1.0).unwrap()
            })
            .collect();
        let trials = 80u64;
        let mut medians = Vec::new();
        for (ti, t) in [8usize, 32, 128, 512, 2048].into_iter().enumerate() {
            let mut tvs: Vec<f64> = (0..trials)
                .map(|trial| {
                    let target = (trial % 4) as usize;
                    let mut r = rng::rng_at(57, &[ti as u64, trial]);
                    let c =
                        sample_context(&envs[target], t, ContextMode::UniformQuery, &mut r).unwrap();
                    let (pick, _) = er_identify(&models, &c).unwrap();
                    expected_tv(|s, a| Ok(models[pick].row(s, a).to_vec()), &envs[target]).unwrap()
                })
                .collect();
            tvs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            medians.push(tvs[trials as usize / 2]);
        }
        for w in medians.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "medians increased: {medians:?}");
        }
    }

    #[test]
    fn model_doc_round_trip() {
        let envs = family(2, (3, 2, 3), 61);
        let models: Vec<TabularWorldModel> = envs
            .iter()
            .enumerate()
            .map(|(i, env)| {
                let mut r = rng::rng_at(62, &[i as u64]);
                let c = sample_context(env, 300, ContextMode::UniformQuery, &mut r).unwrap();
                fit_tabular_model(&[c], (3, 2, 3), 1.0).unwrap()
            })
            .collect();
        let doc = models_to_doc(&models).unwrap();
        let json = serde_json::to_string(&doc).unwrap();
        let back = models_from_doc(&serde_json::from_str(&json).unwrap()).unwrap();
        for (a, b) in models.iter().zip(&back) {
            assert_eq!(a.probs, b.probs);
            assert_eq!(a.fit_count, b.fit_count);
        }
    }
}
