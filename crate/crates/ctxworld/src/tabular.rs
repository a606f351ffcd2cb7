//! Procedurally generated tabular MDPs and POMDPs.
//!
//! Families of discrete environments are the substrate for the count-based
//! predictors in [`crate::estimators`] and the bound verification harness in
//! [`crate::bounds`]. Environments are immutable after construction and safe
//! to share across threads; random streams are per-call and caller-owned.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Tolerance for "rows sum to one" checks.
pub const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Mdp,
    Pomdp,
}

/// A tabular (PO)MDP: transition table over states and an observation table
/// per state. For an MDP the observation space equals the state space and the
/// observation table is the identity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscreteEnv {
    pub env_id: u64,
    pub num_states: usize,
    pub num_actions: usize,
    pub num_obs: usize,
    pub kind: EnvKind,
    /// Row-major `|S| * |A|` rows, each a probability vector over states.
    pub transition: Vec<Vec<f64>>,
    /// `|S|` rows, each a probability vector over observations.
    pub observation: Vec<Vec<f64>>,
}

impl DiscreteEnv {
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        &self.transition[s * self.num_actions + a]
    }

    /// Exact marginal next-observation distribution for a query `(s, a)`:
    /// the transition row pushed through the observation table.
    pub fn true_transition_dist(&self, s: usize, a: usize) -> Vec<f64> {
        let row = self.transition_row(s, a);
        let mut out = vec![0.0; self.num_obs];
        for (s_next, &p) in row.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (o, &z) in self.observation[s_next].iter().enumerate() {
                out[o] += p * z;
            }
        }
        out
    }

    /// Sample one step: next state from the transition row, observation from
    /// the next state's observation row (identity when MDP).
    pub fn step(&self, s: usize, a: usize, rng: &mut ChaCha8Rng) -> Result<(usize, usize)> {
        if s >= self.num_states || a >= self.num_actions {
            return Err(Error::Contract(format!(
                "step index out of range: s={s} a={a} dims=({}, {})",
                self.num_states, self.num_actions
            )));
        }
        let s_next = sample_categorical(self.transition_row(s, a), rng);
        let o_next = match self.kind {
            EnvKind::Mdp => s_next,
            EnvKind::Pomdp => sample_categorical(&self.observation[s_next], rng),
        };
        Ok((s_next, o_next))
    }

    /// Exact Bayes filter update of a belief over states after taking action
    /// `a` and observing `o_next`. This is the simulator-side oracle behind
    /// the belief-weighted estimator.
    pub fn filter_belief(&self, belief: &[f64], a: usize, o_next: usize) -> Result<Vec<f64>> {
        check_belief(belief, self.num_states)?;
        if a >= self.num_actions || o_next >= self.num_obs {
            return Err(Error::Contract(format!(
                "filter_belief index out of range: a={a} o={o_next}"
            )));
        }
        let mut post = vec![0.0; self.num_states];
        for (s, &b) in belief.iter().enumerate() {
            if b == 0.0 {
                continue;
            }
            for (s_next, &p) in self.transition_row(s, a).iter().enumerate() {
                post[s_next] += b * p * self.observation[s_next][o_next];
            }
        }
        let z: f64 = post.iter().sum();
        if z <= 0.0 {
            return Err(Error::Numerical(
                "belief filter: observation has zero probability under the belief".into(),
            ));
        }
        for v in &mut post {
            *v /= z;
        }
        Ok(post)
    }

    /// Validate the simplex invariants on every row.
    pub fn validate(&self) -> Result<()> {
        if self.num_states == 0 || self.num_actions == 0 || self.num_obs == 0 {
            return Err(Error::Config("environment has a zero dimension".into()));
        }
        if self.transition.len() != self.num_states * self.num_actions {
            return Err(Error::Contract("transition table has wrong row count".into()));
        }
        if self.observation.len() != self.num_states {
            return Err(Error::Contract("observation table has wrong row count".into()));
        }
        for row in self.transition.iter().chain(self.observation.iter()) {
            check_simplex(row)?;
        }
        if self.kind == EnvKind::Mdp {
            if self.num_obs != self.num_states {
                return Err(Error::Contract("MDP requires |O| == |S|".into()));
            }
            for (s, row) in self.observation.iter().enumerate() {
                for (o, &z) in row.iter().enumerate() {
                    let expect = if o == s { 1.0 } else { 0.0 };
                    if (z - expect).abs() > SIMPLEX_TOL {
                        return Err(Error::Contract("MDP observation table is not identity".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_simplex(row: &[f64]) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if row.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Contract(format!(
            "probability row invalid (sum={sum}, min={:?})",
            row.iter().cloned().fold(f64::INFINITY, f64::min)
        )));
    }
    Ok(())
}

pub(crate) fn check_belief(belief: &[f64], num_states: usize) -> Result<()> {
    if belief.len() != num_states {
        return Err(Error::Contract(format!(
            "belief length {} != |S| {num_states}",
            belief.len()
        )));
    }
    let sum: f64 = belief.iter().sum();
    if belief.iter().any(|&b| b < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("belief not normalized (sum={sum})")));
    }
    Ok(())
}

/// Inverse-CDF draw from a probability vector.
fn sample_categorical(row: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen::<f64>();
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    row.len() - 1
}

/// How a family of environments is generated.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvFamilyConfig {
    /// Number of environments to generate.
    pub count: usize,
    /// (|S|, |A|, |O|). For MDPs `num_obs` is forced to `num_states`.
    pub dims: (usize, usize, usize),
    /// Dirichlet-style sharpness of sampled rows; small values give spiky
    /// near-deterministic rows, 1.0 gives uniform-simplex draws.
    pub concentration: f64,
    /// Fraction of rows replaced by one-hot rows (uniformly chosen target).
    pub determinism_fraction: f64,
    pub kind: EnvKind,
    pub seed: u64,
}

impl EnvFamilyConfig {
    pub fn validate(&self) -> Result<()> {
        let (s, a, o) = self.dims;
        if self.count == 0 {
            return Err(Error::Config("count must be >= 1".into()));
        }
        if s == 0 || a == 0 || o == 0 {
            return Err(Error::Config(format!("invalid dims {:?}", self.dims)));
        }
        if !(self.concentration > 0.0) {
            return Err(Error::Config("concentration must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.determinism_fraction) {
            return Err(Error::Config("determinism_fraction must lie in [0,1]".into()));
        }
        if self.kind == EnvKind::Mdp && o != s {
            return Err(Error::Config("MDP requires |O| == |S|".into()));
        }
        Ok(())
    }
}

/// Symmetric Dirichlet draw via normalized Gamma variates.
fn sample_simplex(k: usize, concentration: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    let gamma = Gamma::new(concentration, 1.0).expect("concentration > 0");
    let mut row: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let mut sum: f64 = row.iter().sum();
    if sum <= 0.0 {
        // All-zero draws are possible for tiny concentration under f64.
        let idx = rng.gen_range(0..k);
        row.iter_mut().for_each(|v| *v = 0.0);
        row[idx] = 1.0;
        sum = 1.0;
    }
    for v in &mut row {
        *v /= sum;
    }
    // Exact renormalization so downstream sum checks hold at 1e-12.
    let s2: f64 = row.iter().sum();
    for v in &mut row {
        *v /= s2;
    }
    row
}

fn sample_row(k: usize, cfg: &EnvFamilyConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let deterministic = cfg.determinism_fraction > 0.0 && rng.gen::<f64>() < cfg.determinism_fraction;
    if deterministic {
        let target = rng.gen_range(0..k);
        let mut row = vec![0.0; k];
        row[target] = 1.0;
        row
    } else {
        sample_simplex(k, cfg.concentration, rng)
    }
}

/// Generate `config.count` environments. Deterministic given `config.seed`.
pub fn sample_env_family(config: &EnvFamilyConfig) -> Result<Vec<DiscreteEnv>> {
    config.validate()?;
    let (s_dim, a_dim, o_dim) = config.dims;
    let mut envs = Vec::with_capacity(config.count);
    for idx in 0..config.count {
        let mut r = rng::rng_at(config.seed, &[idx as u64]);
        let transition: Vec<Vec<f64>> = (0..s_dim * a_dim)
            .map(|_| sample_row(s_dim, config, &mut r))
            .collect();
        let observation: Vec<Vec<f64>> = match config.kind {
            EnvKind::Mdp => (0..s_dim)
                .map(|s| {
                    let mut row = vec![0.0; s_dim];
                    row[s] = 1.0;
                    row
                })
                .collect(),
            EnvKind::Pomdp => (0..s_dim)
                .map(|_| sample_row(o_dim, config, &mut r))
                .collect(),
        };
        let env = DiscreteEnv {
            env_id: rng::derive(config.seed, &[idx as u64, 0x456e_7649]),
            num_states: s_dim,
            num_actions: a_dim,
            num_obs: if config.kind == EnvKind::Mdp { s_dim } else { o_dim },
            kind: config.kind,
            transition,
            observation,
        };
        env.validate()?;
        envs.push(env);
    }
    Ok(envs)
}

/// How context records are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// Each record's `(s, a)` drawn i.i.d. uniform over `|S| x |A|`.
    UniformQuery,
    /// A sequential trajectory from state 0 with uniform-random actions.
    Rollout,
}

/// One record: the query state, the action, and the sampled next observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextRecord {
    pub state: usize,
    pub action: usize,
    pub obs_next: usize,
}

/// An ordered context of `(s, a, o')` records conditioning a predictor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscreteContext {
    pub records: Vec<ContextRecord>,
    pub mode: ContextMode,
}

impl DiscreteContext {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Sample a length-`t` context from `env`.
pub fn sample_context(
    env: &DiscreteEnv,
    t: usize,
    mode: ContextMode,
    rng: &mut ChaCha8Rng,
) -> Result<DiscreteContext> {
    let mut records = Vec::with_capacity(t);
    match mode {
        ContextMode::UniformQuery => {
            for _ in 0..t {
                let s = rng.gen_range(0..env.num_states);
                let a = rng.gen_range(0..env.num_actions);
                let (_, o_next) = env.step(s, a, rng)?;
                records.push(ContextRecord { state: s, action: a, obs_next: o_next });
            }
        }
        ContextMode::Rollout => {
            let mut s = 0usize;
            for _ in 0..t {
                let a = rng.gen_range(0..env.num_actions);
                let (s_next, o_next) = env.step(s, a, rng)?;
                records.push(ContextRecord { state: s, action: a, obs_next: o_next });
                s = s_next;
            }
        }
    }
    Ok(DiscreteContext { records, mode })
}

/// Serialized family document: `{format_version, config, envs}` with
/// row-major flattened tables.
#[derive(Debug, Serialize, Deserialize)]
pub struct EnvFamilyDoc {
    pub format_version: u32,
    pub config: EnvFamilyConfig,
    pub envs: Vec<EnvDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EnvDoc {
    pub env_id: u64,
    pub dims: (usize, usize, usize),
    pub transition: Vec<f64>,
    pub observation: Vec<f64>,
}

pub const ENV_FAMILY_FORMAT_VERSION: u32 = 1;

pub fn family_to_doc(config: &EnvFamilyConfig, envs: &[DiscreteEnv]) -> EnvFamilyDoc {
    EnvFamilyDoc {
        format_version: ENV_FAMILY_FORMAT_VERSION,
        config: config.clone(),
        envs: envs
            .iter()
            .map(|e| EnvDoc {
                env_id: e.env_id,
                dims: (e.num_states, e.num_actions, e.num_obs),
                transition: e.transition.iter().flatten().copied().collect(),
                observation: e.observation.iter().flatten().copied().collect(),
            })
            .collect(),
    }
}

pub fn family_from_doc(doc: &EnvFamilyDoc) -> Result<Vec<DiscreteEnv>> {
    if doc.format_version != ENV_FAMILY_FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported env family format_version {}",
            doc.format_version
        )));
    }
    doc.envs
        .iter()
        .map(|d| {
            let (s, a, o) = d.dims;
            if d.transition.len() != s * a * s || d.observation.len() != s * o {
                return Err(Error::Config("flattened table length mismatch".into()));
            }
            let env = DiscreteEnv {
                env_id: d.env_id,
                num_states: s,
                num_actions: a,
                num_obs: o,
                kind: doc.config.kind,
                transition: d.transition.chunks(s).map(<[f64]>::to_vec).collect(),
                observation: d.observation.chunks(o).map(<[f64]>::to_vec).collect(),
            };
            env.validate()?;
            Ok(env)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(count: usize, dims: (usize, usize, usize), kind: EnvKind) -> EnvFamilyConfig {
        EnvFamilyConfig {
            count,
            dims,
            concentration: 1.0,
            determinism_fraction: 0.0,
            kind,
            seed: 7,
        }
    }

    #[test]
    fn determinism_fraction_one_gives_one_hot_rows() {
        let mut c = cfg(1, (5, 2, 5), EnvKind::Mdp);
        c.determinism_fraction = 1.0;
        let envs = sample_env_family(&c).unwrap();
        for row in &envs[0].transition {
            assert_eq!(row.iter().filter(|&&p| p == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|&&p| p == 0.0).count(), row.len() - 1);
        }
    }

    #[test]
    fn same_seed_same_family() {
        let c = cfg(3, (4, 2, 4), EnvKind::Mdp);
        let a = sample_env_family(&c).unwrap();
        let b = sample_env_family(&c).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.transition, y.transition);
            assert_eq!(x.env_id, y.env_id);
        }
    }

    #[test]
    fn rows_sum_to_one() {
        let envs = sample_env_family(&cfg(4, (6, 3, 6), EnvKind::Mdp)).unwrap();
        assert_eq!(envs.len(), 4);
        for env in &envs {
            for row in env.transition.iter().chain(env.observation.iter()) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() <= SIMPLEX_TOL, "sum={sum}");
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn zero_dims_rejected() {
        let c = cfg(1, (0, 2, 2), EnvKind::Pomdp);
        assert!(matches!(sample_env_family(&c), Err(Error::Config(_))));
    }

    #[test]
    fn step_deterministic_row() {
        let mut env = sample_env_family(&cfg(1, (5, 1, 5), EnvKind::Mdp)).unwrap().remove(0);
        let mut row = vec![0.0; 5];
        row[3] = 1.0;
        env.transition[0] = row;
        let mut r = rng::rng_from_seed(1);
        for _ in 0..50 {
            let (s_next, o_next) = env.step(0, 0, &mut r).unwrap();
            assert_eq!(s_next, 3);
            assert_eq!(o_next, 3);
        }
    }

    #[test]
    fn step_mdp_obs_equals_state() {
        let env = &sample_env_family(&cfg(1, (6, 2, 6), EnvKind::Mdp)).unwrap()[0];
        let mut r = rng::rng_from_seed(2);
        for _ in 0..200 {
            let (s_next, o_next) = env.step(2, 1, &mut r).unwrap();
            assert_eq!(s_next, o_next);
        }
    }

    #[test]
    fn step_frequencies_match_row() {
        let mut env = sample_env_family(&cfg(1, (4, 1, 4), EnvKind::Mdp)).unwrap().remove(0);
        env.transition[0] = vec![0.5, 0.5, 0.0, 0.0];
        let mut r = rng::rng_from_seed(3);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let (s_next, _) = env.step(0, 0, &mut r).unwrap();
            counts[s_next] += 1;
        }
        assert_eq!(counts[2] + counts[3], 0);
        for &c in &counts[..2] {
            let freq = c as f64 / n as f64;
            assert!((freq - 0.5).abs() < 0.01, "freq={freq}");
        }
    }

    #[test]
    fn step_out_of_range_is_contract_error() {
        let env = &sample_env_family(&cfg(1, (3, 2, 3), EnvKind::Mdp)).unwrap()[0];
        let mut r = rng::rng_from_seed(4);
        assert!(matches!(env.step(3, 0, &mut r), Err(Error::Contract(_))));
        assert!(matches!(env.step(0, 2, &mut r), Err(Error::Contract(_))));
    }

    #[test]
    fn empty_context() {
        let env = &sample_env_family(&cfg(1, (3, 2, 3), EnvKind::Mdp)).unwrap()[0];
        let mut r = rng::rng_from_seed(5);
        let ctx = sample_context(env, 0, ContextMode::UniformQuery, &mut r).unwrap();
        assert!(ctx.is_empty());
    }

    #[test]
    fn uniform_query_counts_within_3_sigma() {
        let env = &sample_env_family(&cfg(1, (5, 2, 5), EnvKind::Mdp)).unwrap()[0];
        let mut r = rng::rng_from_seed(6);
        let t = 100_000usize;
        let ctx = sample_context(env, t, ContextMode::UniformQuery, &mut r).unwrap();
        let mut counts = vec![0usize; 10];
        for rec in &ctx.records {
            counts[rec.state * 2 + rec.action] += 1;
        }
        let p = 1.0 / 10.0;
        let mean = t as f64 * p;
        let sigma = (t as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sigma, "count {c} vs mean {mean}");
        }
    }

    #[test]
    fn rollout_traces_deterministic_chain() {
        // Single action, chain s -> s+1 mod 4.
        let mut env = sample_env_family(&cfg(1, (4, 1, 4), EnvKind::Mdp)).unwrap().remove(0);
        for s in 0..4 {
            let mut row = vec![0.0; 4];
            row[(s + 1) % 4] = 1.0;
            env.transition[s] = row;
        }
        let mut r = rng::rng_from_seed(7);
        let ctx = sample_context(&env, 8, ContextMode::Rollout, &mut r).unwrap();
        for (i, rec) in ctx.records.iter().enumerate() {
            assert_eq!(rec.state, i % 4);
            assert_eq!(rec.obs_next, (i + 1) % 4);
        }
    }

    #[test]
    fn true_transition_mdp_returns_row() {
        let env = &sample_env_family(&cfg(1, (4, 2, 4), EnvKind::Mdp)).unwrap()[0];
        assert_eq!(env.true_transition_dist(1, 0), env.transition_row(1, 0).to_vec());
    }

    #[test]
    fn true_transition_identity_observation_pomdp() {
        let mut env = sample_env_family(&cfg(1, (3, 1, 3), EnvKind::Pomdp)).unwrap().remove(0);
        env.observation = (0..3)
            .map(|s| {
                let mut row = vec![0.0; 3];
                row[s] = 1.0;
                row
            })
            .collect();
        let dist = env.true_transition_dist(0, 0);
        for (p, q) in dist.iter().zip(env.transition_row(0, 0)) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn true_transition_degenerate_observation() {
        // |S|=2, T row (0.5, 0.5), both observation rows one-hot at o=0.
        let mut env = sample_env_family(&cfg(1, (2, 1, 2), EnvKind::Pomdp)).unwrap().remove(0);
        env.transition[0] = vec![0.5, 0.5];
        env.observation = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        assert_eq!(env.true_transition_dist(0, 0), vec![1.0, 0.0]);
    }

    #[test]
    fn belief_filter_matches_hand_posterior() {
        // Two states, identity-ish observation: after observing o=1 the
        // posterior must concentrate on state 1.
        let mut env = sample_env_family(&cfg(1, (2, 1, 2), EnvKind::Pomdp)).unwrap().remove(0);
        env.transition[0] = vec![0.5, 0.5];
        env.transition[1] = vec![0.5, 0.5];
        env.observation = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        let post = env.filter_belief(&[1.0, 0.0], 0, 1).unwrap();
        // p(s'=0) ∝ 0.5*0.1, p(s'=1) ∝ 0.5*0.8
        assert!((post[0] - 0.1 / 0.9).abs() < 1e-12);
        assert!((post[1] - 0.8 / 0.9).abs() < 1e-12);
    }

    #[test]
    fn context_frequency_lower_bound() {
        // For T > 4|S|^2|A|^2 log(4|S||A|/δ), min n(s,a) > T/(2|S||A|) in at
        // least 1 - δ/2 of trials.
        let env = &sample_env_family(&cfg(1, (2, 2, 2), EnvKind::Mdp)).unwrap()[0];
        let delta = 0.4f64;
        let sa = 4.0f64;
        let threshold = 4.0 * sa * sa * (4.0 * sa / delta).ln();
        let t = threshold.ceil() as usize + 1;
        let trials = 200;
        let mut ok = 0;
        for trial in 0..trials {
            let mut r = rng::rng_at(11, &[trial]);
            let ctx = sample_context(env, t, ContextMode::UniformQuery, &mut r).unwrap();
            let mut counts = [0usize; 4];
            for rec in &ctx.records {
                counts[rec.state * 2 + rec.action] += 1;
            }
            if counts.iter().all(|&c| (c as f64) > t as f64 / (2.0 * sa)) {
                ok += 1;
            }
        }
        let frac = ok as f64 / trials as f64;
        assert!(frac >= 1.0 - delta / 2.0, "min-count bound held in {frac} of trials");
    }

    #[test]
    fn family_doc_round_trip() {
        let c = cfg(3, (4, 2, 5), EnvKind::Pomdp);
        let envs = sample_env_family(&c).unwrap();
        let doc = family_to_doc(&c, &envs);
        let json = serde_json::to_string(&doc).unwrap();
        let parsed: EnvFamilyDoc = serde_json::from_str(&json).unwrap();
        let back = family_from_doc(&parsed).unwrap();
        for (x, y) in envs.iter().zip(&back) {
            assert_eq!(x.env_id, y.env_id);
            assert_eq!(x.transition, y.transition);
            assert_eq!(x.observation, y.observation);
        }
    }
}
