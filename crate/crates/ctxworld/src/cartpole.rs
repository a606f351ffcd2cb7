//! Randomized cart-pole physics, scripted data collection, and dataset
//! construction.
//!
//! Four physical constants are randomized per environment: gravity, cart
//! mass, pole mass, and pole half-length. Two sampling scopes are defined; a
//! narrow one around the classic task and a wide one that can optionally
//! exclude the narrow box. Trajectories are collected with a fixed linear
//! stabilizing controller whose actions are replaced by uniform noise at a
//! per-trajectory rate, and the pole is never terminated on falling so the
//! data covers failure dynamics too.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::rng;

pub const FORCE_MAG: f64 = 10.0;
pub const TAU: f64 = 0.02;

/// Linear controller weights over `[x, x_dot, theta, theta_dot]`; push right
/// when the weighted sum is nonnegative. Chosen once to balance the classic
/// parameters from small perturbations.
pub const POLICY_WEIGHTS: [f64; 4] = [0.03, 0.10, 1.00, 0.22];

/// Per-trajectory random-action probability range.
pub const NOISE_RANGE: (f64, f64) = (0.3, 0.7);

/// Physical constants of one cart-pole environment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartPoleParams {
    /// Gravity, m/s^2.
    pub g: f64,
    /// Cart mass, kg.
    pub m_c: f64,
    /// Pole mass, kg.
    pub m_p: f64,
    /// Pole half-length, m.
    pub l: f64,
}

impl CartPoleParams {
    pub const ORIGINAL: CartPoleParams = CartPoleParams { g: 9.8, m_c: 1.0, m_p: 0.1, l: 0.5 };

    pub fn validate(&self) -> Result<()> {
        if [self.g, self.m_c, self.m_p, self.l].iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("cart-pole params must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.g, self.m_c, self.m_p, self.l]
    }
}

/// The 4-dimensional raw observation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CartPoleState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

impl CartPoleState {
    pub fn as_array(&self) -> [f64; 4] {
        [self.x, self.x_dot, self.theta, self.theta_dot]
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

/// Parameter sampling scopes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeSpec {
    /// Fixed classic parameters (9.8, 1.0, 0.1, 0.5).
    Original,
    /// Narrow box around the classic task.
    Scope1,
    /// Wide box covering the narrow one.
    Scope1Plus2,
    /// Wide box with the narrow box rejected (a draw is rejected only when
    /// it falls inside the narrow box on all four coordinates).
    Scope1Plus2Excl1,
}

pub const SCOPE1_RANGES: [(f64, f64); 4] = [(8.0, 12.0), (0.8, 1.2), (0.08, 0.12), (0.4, 0.6)];
pub const SCOPE1PLUS2_RANGES: [(f64, f64); 4] =
    [(2.0, 16.0), (0.5, 2.0), (0.05, 0.20), (0.20, 1.0)];

fn inside_box(p: &CartPoleParams, ranges: &[(f64, f64); 4]) -> bool {
    p.as_array().iter().zip(ranges).all(|(&v, &(lo, hi))| v >= lo && v <= hi)
}

impl ScopeSpec {
    /// Per-parameter ranges (degenerate point ranges for `Original`).
    pub fn ranges(&self) -> [(f64, f64); 4] {
        match self {
            ScopeSpec::Original => {
                let o = CartPoleParams::ORIGINAL.as_array();
                [(o[0], o[0]), (o[1], o[1]), (o[2], o[2]), (o[3], o[3])]
            }
            ScopeSpec::Scope1 => SCOPE1_RANGES,
            ScopeSpec::Scope1Plus2 | ScopeSpec::Scope1Plus2Excl1 => SCOPE1PLUS2_RANGES,
        }
    }
}

/// Draw one parameter tuple from a scope, each coordinate uniform over its
/// range.
pub fn sample_params(scope: ScopeSpec, rng: &mut ChaCha8Rng) -> CartPoleParams {
    match scope {
        ScopeSpec::Original => CartPoleParams::ORIGINAL,
        ScopeSpec::Scope1 | ScopeSpec::Scope1Plus2 => draw_in(&scope.ranges(), rng),
        ScopeSpec::Scope1Plus2Excl1 => loop {
            let p = draw_in(&SCOPE1PLUS2_RANGES, rng);
            if !inside_box(&p, &SCOPE1_RANGES) {
                return p;
            }
        },
    }
}

fn draw_in(ranges: &[(f64, f64); 4], rng: &mut ChaCha8Rng) -> CartPoleParams {
    let mut v = [0.0; 4];
    for (x, &(lo, hi)) in v.iter_mut().zip(ranges) {
        *x = if lo == hi { lo } else { rng.gen_range(lo..hi) };
    }
    CartPoleParams { g: v[0], m_c: v[1], m_p: v[2], l: v[3] }
}

/// One frictionless cart-pole step under a bang-bang force of `±10 N`,
/// integrated with the standard Euler update (positions advance with the old
/// velocities, then velocities with the accelerations) at `dt = 0.02 s`.
pub fn step_dynamics(
    params: &CartPoleParams,
    state: &CartPoleState,
    action: u8,
) -> Result<CartPoleState> {
    if !state.is_finite() {
        return Err(Error::Contract(format!("non-finite state: {state:?}")));
    }
    if action > 1 {
        return Err(Error::Contract(format!("action must be 0 or 1, got {action}")));
    }
    let force = if action == 1 { FORCE_MAG } else { -FORCE_MAG };
    let total_mass = params.m_c + params.m_p;
    let polemass_length = params.m_p * params.l;
    let cos = state.theta.cos();
    let sin = state.theta.sin();
    let temp = (force + polemass_length * state.theta_dot * state.theta_dot * sin) / total_mass;
    let theta_acc = (params.g * sin - cos * temp)
        / (params.l * (4.0 / 3.0 - params.m_p * cos * cos / total_mass));
    let x_acc = temp - polemass_length * theta_acc * cos / total_mass;
    Ok(CartPoleState {
        x: state.x + TAU * state.x_dot,
        x_dot: state.x_dot + TAU * x_acc,
        theta: state.theta + TAU * state.theta_dot,
        theta_dot: state.theta_dot + TAU * theta_acc,
    })
}

/// Deterministic stabilizing controller: 1 when the weighted state sum is
/// nonnegative, 0 otherwise.
pub fn scripted_policy(state: &CartPoleState) -> u8 {
    let s = state.as_array();
    let sum: f64 = s.iter().zip(&POLICY_WEIGHTS).map(|(a, b)| a * b).sum();
    u8::from(sum >= 0.0)
}

/// A recorded episode: `length + 1` observations and `length` actions, with
/// the per-trajectory random-action probability that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub params: CartPoleParams,
    pub observations: Vec<CartPoleState>,
    pub actions: Vec<u8>,
    pub noise_level: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.observations.len() != self.actions.len() + 1 {
            return Err(Error::Contract(
                "trajectory must have len(actions) = len(observations) - 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::Contract("noise_level must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// Roll one trajectory: the start state is uniform in `[-0.05, 0.05]^4`; at
/// every step the scripted action is replaced by a uniform coin flip with
/// probability `noise_level`. Never terminates early.
pub fn collect_trajectory(
    params: &CartPoleParams,
    noise_level: f64,
    length: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    params.validate()?;
    if !(0.0..=1.0).contains(&noise_level) {
        return Err(Error::Contract("noise_level must lie in [0,1]".into()));
    }
    let mut state = CartPoleState {
        x: rng.gen_range(-0.05..0.05),
        x_dot: rng.gen_range(-0.05..0.05),
        theta: rng.gen_range(-0.05..0.05),
        theta_dot: rng.gen_range(-0.05..0.05),
    };
    let mut observations = Vec::with_capacity(length + 1);
    let mut actions = Vec::with_capacity(length);
    observations.push(state);
    for _ in 0..length {
        let action = if rng.gen::<f64>() < noise_level {
            rng.gen_range(0..2u8)
        } else {
            scripted_policy(&state)
        };
        state = step_dynamics(params, &state, action)?;
        observations.push(state);
        actions.push(action);
    }
    Ok(Trajectory { params: *params, observations, actions, noise_level })
}

/// Layout of a dataset: `num_envs` parameter draws from `scope`, then
/// `traj_per_env` trajectories per environment, all of the same length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub scope: ScopeSpec,
    pub num_envs: usize,
    pub traj_per_env: usize,
    pub length: usize,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_envs == 0 || self.traj_per_env == 0 {
            return Err(Error::Config("dataset needs at least one trajectory".into()));
        }
        if self.length == 0 {
            return Err(Error::Config("trajectory length must be positive".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.num_envs * self.traj_per_env * self.length
    }
}

/// A built dataset. Trajectories are stored environment-major, so the
/// environment of trajectory `i` is `envs[i / traj_per_env]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub envs: Vec<CartPoleParams>,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn env_of(&self, traj_index: usize) -> usize {
        traj_index / self.spec.traj_per_env
    }
}

/// Build a dataset. Each trajectory draws its noise level uniform in
/// `[0.3, 0.7]` and its own RNG from `(seed, env index, trajectory index)`,
/// so collection is order-independent and parallel-safe.
pub fn build_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut env_rng = rng::rng_at(seed, &[0xe4f5]);
    let envs: Vec<CartPoleParams> =
        (0..spec.num_envs).map(|_| sample_params(spec.scope, &mut env_rng)).collect();
    let trajectories: Vec<Trajectory> = (0..spec.num_envs * spec.traj_per_env)
        .into_par_iter()
        .map(|i| {
            let env_idx = i / spec.traj_per_env;
            let traj_idx = i % spec.traj_per_env;
            let mut r = rng::rng_at(seed, &[0x7fa1, env_idx as u64, traj_idx as u64]);
            let noise = r.gen_range(NOISE_RANGE.0..NOISE_RANGE.1);
            collect_trajectory(&envs[env_idx], noise, spec.length, &mut r)
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { spec: spec.clone(), seed, envs, trajectories })
}

// ---------------------------------------------------------------------------
// Dataset container
//
// Binary layout: magic "CPD1", u32 LE header length, header JSON
// {format_version, spec, seed, counts}, then one fixed-size record per
// trajectory: params (4 x f64 LE), noise_level (f64 LE), observations
// (4*(L+1) x f32 LE), actions (L bytes). A pure-JSON variant exists for
// debugging.
// ---------------------------------------------------------------------------

pub const DATASET_MAGIC: &[u8; 4] = b"CPD1";
pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    format_version: u32,
    spec: DatasetSpec,
    seed: u64,
    counts: DatasetCounts,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetCounts {
    num_envs: usize,
    num_trajectories: usize,
    steps_per_trajectory: usize,
    total_steps: usize,
}

pub fn write_dataset<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    let header = DatasetHeader {
        format_version: DATASET_FORMAT_VERSION,
        spec: dataset.spec.clone(),
        seed: dataset.seed,
        counts: DatasetCounts {
            num_envs: dataset.envs.len(),
            num_trajectories: dataset.trajectories.len(),
            steps_per_trajectory: dataset.spec.length,
            total_steps: dataset.spec.total_steps(),
        },
    };
    let header_json = serde_json::to_vec(&header)?;
    out.write_all(DATASET_MAGIC)?;
    out.write_all(&(header_json.len() as u32).to_le_bytes())?;
    out.write_all(&header_json)?;
    for traj in &dataset.trajectories {
        traj.validate()?;
        for v in traj.params.as_array() {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&traj.noise_level.to_le_bytes())?;
        for obs in &traj.observations {
            for v in obs.as_array() {
                out.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        out.write_all(&traj.actions)?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(mut input: R) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Config("not a cart-pole dataset (bad magic)".into()));
    }
    let mut len_bytes = [0u8; 4];
    input.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    input.read_exact(&mut header_json)?;
    let header: DatasetHeader = serde_json::from_slice(&header_json)?;
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported dataset format_version {}",
            header.format_version
        )));
    }
    let l = header.counts.steps_per_trajectory;
    let mut trajectories = Vec::with_capacity(header.counts.num_trajectories);
    let mut envs: Vec<CartPoleParams> = Vec::with_capacity(header.counts.num_envs);
    for i in 0..header.counts.num_trajectories {
        let mut f64buf = [0u8; 8];
        let mut p = [0.0f64; 4];
        for v in &mut p {
            input.read_exact(&mut f64buf)?;
            *v = f64::from_le_bytes(f64buf);
        }
        let params = CartPoleParams { g: p[0], m_c: p[1], m_p: p[2], l: p[3] };
        input.read_exact(&mut f64buf)?;
        let noise_level = f64::from_le_bytes(f64buf);
        let mut obs = Vec::with_capacity(l + 1);
        let mut f32buf = [0u8; 4];
        for _ in 0..=l {
            let mut s = [0.0f64; 4];
            for v in &mut s {
                input.read_exact(&mut f32buf)?;
                *v = f32::from_le_bytes(f32buf) as f64;
            }
            obs.push(CartPoleState { x: s[0], x_dot: s[1], theta: s[2], theta_dot: s[3] });
        }
        let mut actions = vec![0u8; l];
        input.read_exact(&mut actions)?;
        if i % header.spec.traj_per_env == 0 {
            envs.push(params);
        }
        trajectories.push(Trajectory { params, observations: obs, actions, noise_level });
    }
    Ok(Dataset { spec: header.spec, seed: header.seed, envs, trajectories })
}

/// Debug-friendly JSON rendering of the whole dataset.
pub fn dataset_to_json(dataset: &Dataset) -> Result<String> {
    Ok(serde_json::to_string_pretty(dataset)?)
}

pub fn dataset_from_json(json: &str) -> Result<Dataset> {
    Ok(serde_json::from_str(json)?)
}
