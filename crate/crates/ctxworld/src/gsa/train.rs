//! Deterministic mini-batch training loop.
//!
//! Gradients for the sequences of a batch are computed in parallel, then
//! reduced in batch-index order, so the result is independent of thread
//! count. Masks, shuffles, and initialization all derive from the run seed.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{build_sequence_graph, LossConfig, LossParts};
use super::model::{GsaModel, ParamVars};
use super::optim::{cosine_lr, AdamW, AdamWConfig};
use super::tensor::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng;

/// One training or evaluation sequence: `len+1` observation rows (already
/// standardized by the caller) and `len` actions.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub obs: Tensor,
    pub actions: Vec<usize>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn validate(&self, obs_dim: usize) -> Result<()> {
        if self.obs.rows() != self.actions.len() + 1 || self.obs.cols() != obs_dim {
            return Err(Error::Contract("sequence shape mismatch".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    #[serde(default)]
    pub adamw: AdamWConfig,
    /// Probability of replacing a ground-truth latent input with the model's
    /// own previous prediction (position 0 is never replaced).
    #[serde(default)]
    pub mask_prob: f64,
    #[serde(default)]
    pub loss: LossConfig,
    pub seed: u64,
    #[serde(default)]
    pub verbose: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config("mask_prob must lie in [0,1]".into()));
        }
        if self.lr_init < 0.0 || self.lr_final < 0.0 {
            return Err(Error::Config("learning rates must be nonnegative".into()));
        }
        self.loss.validate()
    }
}

/// Per-epoch training curve entry.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub reconstruction: f64,
    pub kl_latent: f64,
    pub kl_transition: f64,
    pub lr: f64,
}

fn zero_grads_like(model: &GsaModel) -> Vec<Tensor> {
    model.params.flatten().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect()
}

/// Forward only: the per-term loss of one sequence.
pub fn sequence_loss(
    model: &GsaModel,
    seq: &Sequence,
    mask: Option<&[bool]>,
    loss_cfg: &LossConfig,
) -> Result<LossParts> {
    let mut tape = Tape::new();
    let pv = ParamVars::bind(&model.params, &mut tape, false);
    let graph = build_sequence_graph(model, &mut tape, &pv, &seq.obs, &seq.actions, mask, loss_cfg)?;
    Ok(graph.parts)
}

/// Forward + backward for one sequence; returns gradients in parameter
/// declaration order (the order of [`crate::gsa::Params::visit`]).
pub fn sequence_gradients(
    model: &GsaModel,
    seq: &Sequence,
    mask: Option<&[bool]>,
    loss_cfg: &LossConfig,
) -> Result<(Vec<Tensor>, LossParts)> {
    let mut tape = Tape::new();
    let pv = ParamVars::bind(&model.params, &mut tape, true);
    let graph = build_sequence_graph(model, &mut tape, &pv, &seq.obs, &seq.actions, mask, loss_cfg)?;
    tape.backward(graph.loss)?;
    let grads = pv
        .flatten()
        .into_iter()
        .map(|v| {
            tape.grad(v).cloned().unwrap_or_else(|| {
                let t = tape.value(v);
                Tensor::zeros(t.rows(), t.cols())
            })
        })
        .collect();
    Ok((grads, graph.parts))
}

/// Train in place; returns the loss curve. Identical `(data, config)` gives
/// bit-identical parameters regardless of thread count.
pub fn train(
    model: &mut GsaModel,
    data: &[Sequence],
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training data is empty".into()));
    }
    for seq in data {
        seq.validate(model.config.obs_dim)?;
    }
    let n = data.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch) as u64;

    let mut opt = AdamW::new(cfg.adamw, &model.params.flatten());
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0u64;

    for epoch in 0..cfg.epochs {
        // Deterministic shuffle.
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = rng::rng_at(cfg.seed, &[0x5e0f, epoch as u64]);
        for i in (1..n).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_parts = LossParts::default();
        let mut epoch_items = 0usize;
        let mut lr_last = cfg.lr_init;

        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(Vec<Tensor>, LossParts)> = batch
                .par_iter()
                .map(|&idx| {
                    let seq = &data[idx];
                    let mask: Option<Vec<bool>> = if cfg.mask_prob > 0.0 {
                        let mut mr = rng::rng_at(cfg.seed, &[0x3a5c, epoch as u64, idx as u64]);
                        Some(
                            (0..seq.len())
                                .map(|t| t > 0 && mr.gen::<f64>() < cfg.mask_prob)
                                .collect(),
                        )
                    } else {
                        None
                    };
                    sequence_gradients(model, seq, mask.as_deref(), &cfg.loss)
                })
                .collect::<Result<_>>()?;

            let mut grads = zero_grads_like(model);
            for (g, parts) in &results {
                for (acc, add) in grads.iter_mut().zip(g) {
                    for (a, b) in acc.data.iter_mut().zip(&add.data) {
                        *a += b;
                    }
                }
                epoch_parts.total += parts.total;
                epoch_parts.reconstruction += parts.reconstruction;
                epoch_parts.kl_latent += parts.kl_latent;
                epoch_parts.kl_transition += parts.kl_transition;
            }
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grads {
                g.data.iter_mut().for_each(|v| *v *= scale);
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at epoch {epoch}, step {global_step}"
                )));
            }

            let lr = cosine_lr(global_step, total_steps.saturating_sub(1), cfg.lr_init, cfg.lr_final);
            lr_last = lr;
            opt.step(&mut model.params.flatten_mut(), &grads, lr)?;
            global_step += 1;
            epoch_items += batch.len();
        }

        let k = epoch_items as f64;
        let stats = EpochStats {
            epoch,
            loss: epoch_parts.total / k,
            reconstruction: epoch_parts.reconstruction / k,
            kl_latent: epoch_parts.kl_latent / k,
            kl_transition: epoch_parts.kl_transition / k,
            lr: lr_last,
        };
        if !stats.loss.is_finite() {
            return Err(Error::Numerical(format!("loss diverged at epoch {epoch}")));
        }
        if cfg.verbose {
            eprintln!(
                "epoch {:>3}  loss {:.6}  recon {:.6}  kl_lat {:.4}  kl_tr {:.5}  lr {:.2e}",
                epoch, stats.loss, stats.reconstruction, stats.kl_latent, stats.kl_transition, stats.lr
            );
        }
        curve.push(stats);
    }
    Ok(curve)
}

/// Write a loss curve as CSV.
pub fn write_curve_csv<W: std::io::Write>(curve: &[EpochStats], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "loss", "reconstruction", "kl_latent", "kl_transition", "lr"])?;
    for row in curve {
        w.write_record(&[
            row.epoch.to_string(),
            crate::bounds::format_float(row.loss),
            crate::bounds::format_float(row.reconstruction),
            crate::bounds::format_float(row.kl_latent),
            crate::bounds::format_float(row.kl_transition),
            crate::bounds::format_float(row.lr),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gsa::model::GsaConfig;

    fn tiny_cfg() -> GsaConfig {
        GsaConfig {
            hidden: 8,
            layers: 1,
            heads: 2,
            mem_len: 3,
            chunk: 4,
            obs_dim: 4,
            num_actions: 2,
            train_sigma_head: true,
        }
    }

    fn toy_data(n: usize, len: usize, seed: u64) -> Vec<Sequence> {
        // A linear-ish synthetic system so a small model can make progress.
        (0..n)
            .map(|i| {
                let mut r = rng::rng_at(seed, &[i as u64]);
                let mut state = [0.0f64; 4];
                state.iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0));
                let mut obs = Vec::with_capacity((len + 1) * 4);
                let mut actions = Vec::with_capacity(len);
                obs.extend_from_slice(&state);
                for _ in 0..len {
                    let a = r.gen_range(0..2usize);
                    let push = if a == 1 { 0.1 } else { -0.1 };
                    state[1] += push;
                    state[0] += 0.1 * state[1];
                    state[3] -= 0.05 * push;
                    state[2] += 0.1 * state[3];
                    obs.extend_from_slice(&state);
                    actions.push(a);
                }
                Sequence { obs: Tensor::from_vec(len + 1, 4, obs), actions }
            })
            .collect()
    }

    fn base_train_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            lr_init: 3e-3,
            lr_final: 3e-4,
            adamw: AdamWConfig::default(),
            mask_prob: 0.0,
            loss: LossConfig::default(),
            seed: 5,
            verbose: false,
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut model = GsaModel::new(tiny_cfg(), 1).unwrap();
        let before: Vec<Tensor> = model.params.flatten().into_iter().cloned().collect();
        let data = toy_data(4, 10, 2);
        let mut cfg = base_train_cfg();
        cfg.lr_init = 0.0;
        cfg.lr_final = 0.0;
        cfg.epochs = 1;
        train(&mut model, &data, &cfg).unwrap();
        for (a, b) in model.params.flatten().iter().zip(&before) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn same_seed_identical_parameters() {
        let data = toy_data(6, 12, 3);
        let cfg = base_train_cfg();
        let run = || {
            let mut model = GsaModel::new(tiny_cfg(), 9).unwrap();
            train(&mut model, &data, &cfg).unwrap();
            model.params.flatten().into_iter().cloned().collect::<Vec<Tensor>>()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data, y.data);
        }
    }

    #[test]
    fn loss_decreases_on_toy_data() {
        let mut model = GsaModel::new(tiny_cfg(), 11).unwrap();
        let data = toy_data(24, 16, 4);
        let mut cfg = base_train_cfg();
        cfg.epochs = 12;
        cfg.mask_prob = 0.1;
        let curve = train(&mut model, &data, &cfg).unwrap();
        let first = curve.first().unwrap().loss;
        let last = curve.last().unwrap().loss;
        assert!(
            last <= first * 0.5,
            "expected >= 50% loss reduction, got {first} -> {last}"
        );
    }

    #[test]
    fn non_finite_data_aborts() {
        let mut model = GsaModel::new(tiny_cfg(), 13).unwrap();
        let mut data = toy_data(2, 8, 5);
        data[0].obs.data[3] = f64::INFINITY;
        let cfg = base_train_cfg();
        assert!(train(&mut model, &data, &cfg).is_err());
    }

    #[test]
    fn curve_csv_has_fixed_columns() {
        let curve = vec![EpochStats {
            epoch: 0,
            loss: 1.5,
            reconstruction: 1.0,
            kl_latent: 0.25,
            kl_transition: 0.25,
            lr: 1e-4,
        }];
        let mut buf = Vec::new();
        write_curve_csv(&curve, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,loss,reconstruction,kl_latent,kl_transition,lr\n"));
        assert!(text.contains("0,1.5,1.0,0.25,0.25,0.0001"), "{text}");
    }

    #[test]
    fn finite_difference_gradients_full_model() {
        // Central differences over every parameter of a tiny model on a
        // short masked sequence.
        let model = GsaModel::new(tiny_cfg(), 17).unwrap();
        let data = toy_data(1, 6, 6);
        let seq = &data[0];
        let mask = vec![false, false, true, false, true, false];
        let loss_cfg = LossConfig::default();

        let (grads, _) = sequence_gradients(&model, seq, Some(&mask), &loss_cfg).unwrap();
        let names = model.params.names();

        let eval = |params_override: &Params| -> f64 {
            let m = GsaModel { config: model.config.clone(), params: params_override.clone() };
            let mut tape = Tape::new();
            let pv = ParamVars::bind(&m.params, &mut tape, false);
            let g = build_sequence_graph(&m, &mut tape, &pv, &seq.obs, &seq.actions, Some(&mask), &loss_cfg)
                .unwrap();
            g.parts.total
        };

        let eps = 1e-5;
        let mut checked = 0usize;
        for (pi, name) in names.iter().enumerate() {
            let len = model.params.flatten()[pi].data.len();
            // Probe a handful of coordinates per tensor to keep this fast;
            // the acceptance suite runs the exhaustive version.
            let stride = (len / 5).max(1);
            for i in (0..len).step_by(stride) {
                let mut plus = model.params.clone();
                plus.flatten_mut()[pi].data[i] += eps;
                let mut minus = model.params.clone();
                minus.flatten_mut()[pi].data[i] -= eps;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let an = grads[pi].data[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel <= 1e-4, "{name}[{i}]: fd={fd} analytic={an} rel={rel}");
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    use crate::gsa::model::Params;
}
