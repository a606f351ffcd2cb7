//! Autoregressive in-context evaluation and memory-state export.
//!
//! The protocol: consume a context of length `T` step by step through the
//! constant-memory recurrent form, then predict `k` future observations by
//! feeding back the model's own predicted latents while using the recorded
//! ground-truth actions. The reported error for a `(T, k)` cell is the mean
//! squared error of the k-th prediction.

use serde::{Deserialize, Serialize};

use super::model::{GsaModel, GsaState};
use super::train::Sequence;
use crate::error::{Error, Result};

/// Anything that can consume a context and forecast observations; the world
/// model implements it, and tests can inject oracles.
pub trait SequencePredictor {
    /// Reset to an empty context.
    fn begin(&mut self) -> Result<()>;
    /// Consume one `(observation, action)` context step.
    fn observe(&mut self, obs: &[f64], action: usize) -> Result<()>;
    /// Predict the next `k` observations given the next `k-1` ground-truth
    /// actions, without consuming them.
    fn rollout(&self, k: usize, future_actions: &[usize]) -> Result<Vec<Vec<f64>>>;
}

/// The world model as a [`SequencePredictor`]: encode, step the recurrence,
/// decode, feed predictions back.
pub struct GsaPredictor<'m> {
    model: &'m GsaModel,
    state: GsaState,
    last_h: Option<Vec<f64>>,
}

impl<'m> GsaPredictor<'m> {
    pub fn new(model: &'m GsaModel) -> Self {
        GsaPredictor { model, state: model.initial_state(), last_h: None }
    }

    pub fn state(&self) -> &GsaState {
        &self.state
    }

    pub fn last_h(&self) -> Option<&[f64]> {
        self.last_h.as_deref()
    }

    /// Current one-step latent prediction; the zero latent before any
    /// context has been consumed.
    pub fn predicted_latent(&self) -> Result<Vec<f64>> {
        match &self.last_h {
            Some(h) => Ok(self.model.decode_latent(h)?.0),
            None => Ok(vec![0.0; self.model.config.hidden]),
        }
    }

    /// Consume a step whose latent input is supplied directly (used by the
    /// probes to substitute predictions for ground truth).
    pub fn observe_latent(&mut self, latent: &[f64], action: usize) -> Result<()> {
        let (h, next) = self.model.forward_recurrent(&self.state, latent, action)?;
        self.state = next;
        self.last_h = Some(h);
        Ok(())
    }

    /// Copy another predictor's position (memory and last output).
    pub fn clone_from_state(&mut self, other: &GsaPredictor) {
        self.state = other.state.clone();
        self.last_h = other.last_h.clone();
    }
}

impl SequencePredictor for GsaPredictor<'_> {
    fn begin(&mut self) -> Result<()> {
        self.state = self.model.initial_state();
        self.last_h = None;
        Ok(())
    }

    fn observe(&mut self, obs: &[f64], action: usize) -> Result<()> {
        let (s, _) = self.model.encode_obs(obs)?;
        self.observe_latent(&s, action)
    }

    fn rollout(&self, k: usize, future_actions: &[usize]) -> Result<Vec<Vec<f64>>> {
        if k == 0 {
            return Ok(Vec::new());
        }
        if future_actions.len() + 1 < k {
            return Err(Error::Contract(format!(
                "rollout of {k} steps needs {} future actions, got {}",
                k - 1,
                future_actions.len()
            )));
        }
        let mut preds = Vec::with_capacity(k);
        let mut s_cur = self.predicted_latent()?;
        preds.push(self.model.decode_obs(&s_cur)?);
        let mut state = self.state.clone();
        for j in 1..k {
            let (h, next) = self.model.forward_recurrent(&state, &s_cur, future_actions[j - 1])?;
            state = next;
            s_cur = self.model.decode_latent(&h)?.0;
            preds.push(self.model.decode_obs(&s_cur)?);
        }
        Ok(preds)
    }
}

/// One cell of the in-context evaluation table.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IclCell {
    pub t: usize,
    pub k: usize,
    /// Mean squared error of the k-th prediction, averaged over dimensions
    /// and sequences.
    pub mse: f64,
    pub sequences: usize,
}

/// Result of an evaluation sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IclTable {
    pub cells: Vec<IclCell>,
    /// Sequences too short to contribute to any cell.
    pub skipped: usize,
}

impl IclTable {
    pub fn get(&self, t: usize, k: usize) -> Option<&IclCell> {
        self.cells.iter().find(|c| c.t == t && c.k == k)
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Sweep a predictor over `(T, k)` cells. A sequence contributes to every
/// cell with `T + k <= len + 1`; sequences supporting no cell are skipped.
pub fn evaluate_icl_with<P: SequencePredictor>(
    predictor: &mut P,
    sequences: &[Sequence],
    t_grid: &[usize],
    k_list: &[usize],
) -> Result<IclTable> {
    if t_grid.is_empty() || k_list.is_empty() {
        return Err(Error::Config("t_grid and k_list must be nonempty".into()));
    }
    if k_list.iter().any(|&k| k == 0) {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut sums: Vec<f64> = vec![0.0; t_grid.len() * k_list.len()];
    let mut counts: Vec<usize> = vec![0; t_grid.len() * k_list.len()];
    let min_t = *t_grid.iter().min().unwrap();
    let min_k = *k_list.iter().min().unwrap();
    let mut skipped = 0usize;

    for seq in sequences {
        let len = seq.len();
        if min_t + min_k > len + 1 {
            skipped += 1;
            continue;
        }
        predictor.begin()?;
        let mut consumed = 0usize;
        let mut sorted_t: Vec<usize> = t_grid.to_vec();
        sorted_t.sort_unstable();
        for &t in &sorted_t {
            if t + min_k > len + 1 {
                break;
            }
            while consumed < t {
                predictor.observe(seq.obs.row(consumed), seq.actions[consumed])?;
                consumed += 1;
            }
            for (ki, &k) in k_list.iter().enumerate() {
                if t + k > len + 1 {
                    continue;
                }
                let future = &seq.actions[t..(t + k - 1).min(len)];
                let preds = predictor.rollout(k, future)?;
                let target = seq.obs.row(t + k - 1);
                let ti = t_grid.iter().position(|&x| x == t).unwrap();
                sums[ti * k_list.len() + ki] += mse(&preds[k - 1], target);
                counts[ti * k_list.len() + ki] += 1;
            }
        }
    }

    let cells = t_grid
        .iter()
        .enumerate()
        .flat_map(|(ti, &t)| {
            k_list.iter().enumerate().map(move |(ki, &k)| (ti, t, ki, k))
        })
        .map(|(ti, t, ki, k)| {
            let n = counts[ti * k_list.len() + ki];
            IclCell {
                t,
                k,
                mse: if n > 0 { sums[ti * k_list.len() + ki] / n as f64 } else { f64::NAN },
                sequences: n,
            }
        })
        .collect();
    Ok(IclTable { cells, skipped })
}

/// Convenience wrapper running the world model itself.
pub fn evaluate_icl(
    model: &GsaModel,
    sequences: &[Sequence],
    t_grid: &[usize],
    k_list: &[usize],
) -> Result<IclTable> {
    let mut p = GsaPredictor::new(model);
    evaluate_icl_with(&mut p, sequences, t_grid, k_list)
}

/// Flattened memory snapshot for one (sequence, step, layer).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryRow {
    pub sequence: usize,
    pub step: usize,
    pub layer: usize,
    pub state: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryDump {
    pub layers: Vec<usize>,
    pub rows: Vec<MemoryRow>,
}

/// Run each sequence through the recurrent form and dump the selected
/// layers' slot memories (keys, values, accumulated log decay) after every
/// step.
pub fn export_memory_states(
    model: &GsaModel,
    sequences: &[Sequence],
    layers: &[usize],
) -> Result<MemoryDump> {
    if layers.iter().any(|&l| l >= model.config.layers) {
        return Err(Error::Config("layer index out of range".into()));
    }
    let mut rows = Vec::new();
    for (si, seq) in sequences.iter().enumerate() {
        seq.validate(model.config.obs_dim)?;
        let mut state = model.initial_state();
        for t in 0..seq.len() {
            let (s, _) = model.encode_obs(seq.obs.row(t))?;
            let (_, next) = model.forward_recurrent(&state, &s, seq.actions[t])?;
            state = next;
            for &layer in layers {
                rows.push(MemoryRow {
                    sequence: si,
                    step: t,
                    layer,
                    state: state.flatten_layer(layer),
                });
            }
        }
    }
    Ok(MemoryDump { layers: layers.to_vec(), rows })
}
