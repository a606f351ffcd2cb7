//! Analysis probes on trained models: prediction-error sensitivity of the
//! memory (substituting predictions for ground-truth inputs) and silhouette
//! scores of the memory states across environments.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::silhouette::silhouette_score;
use crate::error::{Error, Result};
use crate::gsa::eval::{export_memory_states, GsaPredictor, MemoryDump, SequencePredictor};
use crate::gsa::train::Sequence;
use crate::gsa::GsaModel;
use crate::rng;

/// One scatter point of the substitution probe.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PcPoint {
    pub sequence: usize,
    pub position: usize,
    pub k: usize,
    /// Error of the prediction that replaced the ground-truth input.
    pub pred_mse: f64,
    /// Error inflation k steps after the substitution.
    pub delta_mse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcReport {
    pub points: Vec<PcPoint>,
    /// Spearman rank correlation between `pred_mse` and `delta_mse`.
    pub rho: f64,
    pub rho_ci_low: f64,
    pub rho_ci_high: f64,
    pub rho_per_k: Vec<(usize, f64)>,
    pub bootstrap_resamples: usize,
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Error inflation caused by replacing the input latent at `position` with
/// `latent_override` (or the model's own prediction when `None`).
///
/// Returns the substituted prediction's observation error and, for each `k`,
/// the difference in error at the frame `k` steps later between the
/// substituted and unsubstituted runs.
pub fn substitution_deltas(
    model: &GsaModel,
    seq: &Sequence,
    position: usize,
    ks: &[usize],
    latent_override: Option<&[f64]>,
) -> Result<(f64, Vec<(usize, f64)>)> {
    let max_k = *ks.iter().max().ok_or_else(|| Error::Config("ks must be nonempty".into()))?;
    if position == 0 {
        return Err(Error::Contract("substitution position must be >= 1".into()));
    }
    if position + max_k > seq.len() {
        return Err(Error::Contract(format!(
            "sequence of length {} too short for position {position} with k up to {max_k}",
            seq.len()
        )));
    }

    let mut base = GsaPredictor::new(model);
    for t in 0..position {
        base.observe(seq.obs.row(t), seq.actions[t])?;
    }
    let s_hat = base.predicted_latent()?;
    let pred_mse = mse(&model.decode_obs(&s_hat)?, seq.obs.row(position));
    let substitute = latent_override.map(<[f64]>::to_vec).unwrap_or(s_hat);

    let run = |first_latent: Option<&[f64]>| -> Result<Vec<(usize, f64)>> {
        let mut p = GsaPredictor::new(model);
        p.clone_from_state(&base);
        match first_latent {
            Some(lat) => p.observe_latent(lat, seq.actions[position])?,
            None => p.observe(seq.obs.row(position), seq.actions[position])?,
        }
        let mut errs = Vec::new();
        let mut consumed = position + 1;
        for j in 1..=max_k {
            if j > 1 {
                p.observe(seq.obs.row(consumed), seq.actions[consumed])?;
                consumed += 1;
            }
            if ks.contains(&j) {
                let pred = model.decode_obs(&p.predicted_latent()?)?;
                errs.push((j, mse(&pred, seq.obs.row(position + j))));
            }
        }
        Ok(errs)
    };

    let clean = run(None)?;
    let substituted = run(Some(&substitute))?;
    let deltas = clean
        .iter()
        .zip(&substituted)
        .map(|(&(k, a), &(_, b))| (k, b - a))
        .collect();
    Ok((pred_mse, deltas))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            out[p] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Run the substitution probe over sequences and positions, pool the scatter
/// points, and bootstrap a confidence interval for the rank correlation.
pub fn predictive_coding_probe(
    model: &GsaModel,
    sequences: &[Sequence],
    positions: &[usize],
    ks: &[usize],
    bootstrap_resamples: usize,
    seed: u64,
) -> Result<PcReport> {
    if positions.is_empty() || ks.is_empty() {
        return Err(Error::Config("positions and ks must be nonempty".into()));
    }
    let max_k = *ks.iter().max().unwrap();
    let jobs: Vec<(usize, usize)> = sequences
        .iter()
        .enumerate()
        .flat_map(|(si, seq)| {
            positions
                .iter()
                .filter(move |&&p| p >= 1 && p + max_k <= seq.len())
                .map(move |&p| (si, p))
        })
        .collect();
    if jobs.is_empty() {
        return Err(Error::InsufficientData(
            "no (sequence, position) pair long enough for the probe".into(),
        ));
    }
    let points: Vec<Vec<PcPoint>> = jobs
        .par_iter()
        .map(|&(si, p)| -> Result<Vec<PcPoint>> {
            let (pred_mse, deltas) = substitution_deltas(model, &sequences[si], p, ks, None)?;
            Ok(deltas
                .into_iter()
                .map(|(k, delta_mse)| PcPoint { sequence: si, position: p, k, pred_mse, delta_mse })
                .collect())
        })
        .collect::<Result<_>>()?;
    let points: Vec<PcPoint> = points.into_iter().flatten().collect();

    let xs: Vec<f64> = points.iter().map(|p| p.pred_mse).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.delta_mse).collect();
    let rho = spearman(&xs, &ys);

    let rho_per_k = ks
        .iter()
        .map(|&k| {
            let xs: Vec<f64> = points.iter().filter(|p| p.k == k).map(|p| p.pred_mse).collect();
            let ys: Vec<f64> = points.iter().filter(|p| p.k == k).map(|p| p.delta_mse).collect();
            (k, spearman(&xs, &ys))
        })
        .collect();

    let mut boot = Vec::with_capacity(bootstrap_resamples);
    let mut r = rng::rng_at(seed, &[0xb007]);
    for _ in 0..bootstrap_resamples {
        let (bx, by): (Vec<f64>, Vec<f64>) = (0..points.len())
            .map(|_| {
                let i = rand::Rng::gen_range(&mut r, 0..points.len());
                (xs[i], ys[i])
            })
            .unzip();
        boot.push(spearman(&bx, &by));
    }
    boot.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (lo, hi) = if boot.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let q = |frac: f64| boot[((boot.len() - 1) as f64 * frac).round() as usize];
        (q(0.025), q(0.975))
    };

    Ok(PcReport {
        points,
        rho,
        rho_ci_low: lo,
        rho_ci_high: hi,
        rho_per_k,
        bootstrap_resamples,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SilhouetteReport {
    /// `(layer, score)` pairs.
    pub per_layer: Vec<(usize, f64)>,
    pub points_per_layer: usize,
    pub stride: usize,
}

/// Silhouette scores of memory states with environments as classes.
/// Steps are subsampled by `stride` to keep the pairwise distances cheap;
/// the full dump is returned for external visualization.
pub fn silhouette_probe(
    model: &GsaModel,
    sequences: &[Sequence],
    env_of_sequence: &[usize],
    layers: &[usize],
    stride: usize,
) -> Result<(SilhouetteReport, MemoryDump)> {
    if env_of_sequence.len() != sequences.len() {
        return Err(Error::Contract("env_of_sequence length mismatch".into()));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let dump = export_memory_states(model, sequences, layers)?;
    let mut per_layer = Vec::with_capacity(layers.len());
    let mut points_per_layer = 0;
    for &layer in layers {
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for row in dump.rows.iter().filter(|r| r.layer == layer && (r.step + 1) % stride == 0) {
            points.push(row.state.clone());
            labels.push(env_of_sequence[row.sequence]);
        }
        points_per_layer = points.len();
        per_layer.push((layer, silhouette_score(&points, &labels)?));
    }
    Ok((SilhouetteReport { per_layer, points_per_layer, stride }, dump))
}
