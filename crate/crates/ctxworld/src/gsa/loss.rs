//! Training objective: observation reconstruction plus two Gaussian KL
//! terms.
//!
//! For a sequence of observations `o_1..o_{T+1}` and actions `a_1..a_T`, the
//! model's step-`t` output predicts the next latent; its decoded observation
//! is compared to `o_{t+1}` (squared error), the encoder's posterior is
//! pulled toward the standard normal, and the transition term is the KL from
//! the encoded next latent to the predicted one:
//!
//! ```text
//! total = mse(o_{t+1}, decode(s_hat_t))
//!       + lambda_kl * KL(N(s_t, sigma_t) || N(0, 1))
//!       + transition_weight * KL(N(s_{t+1}, sigma_{t+1}) || N(s_hat_t, sigma_hat_t))
//! ```
//!
//! All terms are means over time steps and latent dimensions.

use serde::{Deserialize, Serialize};

use super::model::{GsaModel, ParamVars};
use super::tensor::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight on the latent regularizer KL.
    pub lambda_kl: f64,
    /// Weight on the transition KL.
    pub transition_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_kl: 1e-3, transition_weight: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_kl < 0.0 || self.transition_weight < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Per-term loss values of one sequence.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub reconstruction: f64,
    pub kl_latent: f64,
    pub kl_transition: f64,
}

/// Elementwise KL between diagonal Gaussians given as (mean, scale) pairs:
/// `ln(s2/s1) + (s1^2 + (m1-m2)^2) / (2 s2^2) - 1/2`.
pub(crate) fn kl_gaussian_graph(
    tape: &mut Tape,
    mean1: Var,
    sig1: Var,
    mean2: Var,
    sig2: Var,
) -> Var {
    let ln2 = tape.ln(sig2);
    let ln1 = tape.ln(sig1);
    let log_ratio = tape.sub(ln2, ln1);
    let var1 = tape.square(sig1);
    let dmean = tape.sub(mean1, mean2);
    let dsq = tape.square(dmean);
    let num = tape.add(var1, dsq);
    let var2 = tape.square(sig2);
    let denom = tape.scale(var2, 2.0);
    let frac = tape.div(num, denom);
    let partial = tape.add(log_ratio, frac);
    tape.add_scalar(partial, -0.5)
}

/// KL against the standard normal: `(m^2 + s^2 - 1 - 2 ln s) / 2`.
pub(crate) fn kl_standard_graph(tape: &mut Tape, mean: Var, sig: Var) -> Var {
    let m2 = tape.square(mean);
    let s2 = tape.square(sig);
    let sum = tape.add(m2, s2);
    let lns = tape.ln(sig);
    let two_lns = tape.scale(lns, 2.0);
    let diff = tape.sub(sum, two_lns);
    let shifted = tape.add_scalar(diff, -1.0);
    tape.scale(shifted, 0.5)
}

/// Everything the training step needs from one sequence graph.
pub(crate) struct SequenceGraph {
    pub loss: Var,
    pub parts: LossParts,
}

/// Build the full per-sequence graph: encode, temporal core (with optional
/// input masking), latent decode, observation decode, and the three loss
/// terms.
pub(crate) fn build_sequence_graph(
    model: &GsaModel,
    tape: &mut Tape,
    pv: &ParamVars,
    observations: &Tensor,
    actions: &[usize],
    mask: Option<&[bool]>,
    cfg: &LossConfig,
) -> Result<SequenceGraph> {
    cfg.validate()?;
    let t_len = actions.len();
    if observations.rows() != t_len + 1 {
        return Err(Error::Contract(format!(
            "need {} observations for {} actions, got {}",
            t_len + 1,
            t_len,
            observations.rows()
        )));
    }
    if t_len == 0 {
        return Err(Error::Contract("cannot train on an empty sequence".into()));
    }
    if observations.cols() != model.config.obs_dim {
        return Err(Error::Contract("observation width mismatch".into()));
    }

    let obs = tape.constant(observations.clone());
    let (s_all, sig_all) = model.encode_obs_graph(tape, pv, obs);
    let s_inputs = tape.slice_rows(s_all, 0, t_len);
    let (h, _state) = model.forward_graph(tape, pv, s_inputs, actions, mask)?;
    let (s_hat, sig_hat) = model.latent_decode_graph(tape, pv, h);
    let o_hat = model.decode_obs_graph(tape, pv, s_hat);

    // Reconstruction against the next observations.
    let targets = tape.slice_rows(obs, 1, t_len);
    let err = tape.sub(o_hat, targets);
    let err2 = tape.square(err);
    let recon = tape.mean_all(err2);

    // Latent regularizer over every encoded observation.
    let kl_lat_elem = kl_standard_graph(tape, s_all, sig_all);
    let kl_lat = tape.mean_all(kl_lat_elem);

    // Transition term: encoded next latent vs predicted one.
    let s_next = tape.slice_rows(s_all, 1, t_len);
    let sig_next = tape.slice_rows(sig_all, 1, t_len);
    let kl_tr_elem = kl_gaussian_graph(tape, s_next, sig_next, s_hat, sig_hat);
    let kl_tr = tape.mean_all(kl_tr_elem);

    let reg = tape.scale(kl_lat, cfg.lambda_kl);
    let trans = tape.scale(kl_tr, cfg.transition_weight);
    let partial = tape.add(recon, reg);
    let total = tape.add(partial, trans);

    let parts = LossParts {
        total: tape.value(total).data[0],
        reconstruction: tape.value(recon).data[0],
        kl_latent: tape.value(kl_lat).data[0],
        kl_transition: tape.value(kl_tr).data[0],
    };
    Ok(SequenceGraph { loss: total, parts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gsa::model::{GsaConfig, ParamVars};
    use crate::rng;

    fn tiny() -> GsaModel {
        GsaModel::new(
            GsaConfig {
                hidden: 10,
                layers: 1,
                heads: 2,
                mem_len: 4,
                chunk: 4,
                obs_dim: 4,
                num_actions: 2,
                train_sigma_head: true,
            },
            1,
        )
        .unwrap()
    }

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).data[0]
    }

    #[test]
    fn gaussian_kl_known_values() {
        let mut tape = Tape::new();
        let m1 = tape.constant(Tensor::from_vec(1, 1, vec![1.0]));
        let s1 = tape.constant(Tensor::from_vec(1, 1, vec![1.0]));
        let m0 = tape.constant(Tensor::from_vec(1, 1, vec![0.0]));
        let s0 = tape.constant(Tensor::from_vec(1, 1, vec![1.0]));
        // KL(N(1,1) || N(0,1)) = 0.5.
        let kl = kl_gaussian_graph(&mut tape, m1, s1, m0, s0);
        assert!((scalar(&tape, kl) - 0.5).abs() < 1e-15);
        // Same distribution: 0.
        let kl0 = kl_gaussian_graph(&mut tape, m1, s1, m1, s1);
        assert!(scalar(&tape, kl0).abs() < 1e-15);
        // Standard-normal form agrees.
        let std = kl_standard_graph(&mut tape, m1, s1);
        assert!((scalar(&tape, std) - 0.5).abs() < 1e-15);
        let std0 = kl_standard_graph(&mut tape, m0, s0);
        assert!(scalar(&tape, std0).abs() < 1e-15);
    }

    #[test]
    fn loss_terms_nonnegative() {
        let model = tiny();
        let mut r = rng::rng_from_seed(2);
        let obs = Tensor::randn_scaled(9, 4, 1, &mut r);
        let actions = vec![0, 1, 1, 0, 1, 0, 0, 1];
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&model.params, &mut tape, true);
        let g = build_sequence_graph(
            &model,
            &mut tape,
            &pv,
            &obs,
            &actions,
            None,
            &LossConfig::default(),
        )
        .unwrap();
        assert!(g.parts.reconstruction >= -1e-12);
        assert!(g.parts.kl_latent >= -1e-12);
        assert!(g.parts.kl_transition >= -1e-12);
        assert!(g.parts.total.is_finite());
    }

    #[test]
    fn loss_shape_contracts() {
        let model = tiny();
        let obs = Tensor::zeros(5, 4);
        // Wrong action count for the observation count.
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&model.params, &mut tape, false);
        assert!(build_sequence_graph(
            &model,
            &mut tape,
            &pv,
            &obs,
            &[0, 1],
            None,
            &LossConfig::default()
        )
        .is_err());
        let bad = LossConfig { lambda_kl: -1.0, transition_weight: 1.0 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn every_parameter_gets_gradient() {
        let model = tiny();
        let mut r = rng::rng_from_seed(3);
        let obs = Tensor::randn_scaled(7, 4, 1, &mut r);
        let actions = vec![0, 1, 0, 1, 1, 0];
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&model.params, &mut tape, true);
        let g = build_sequence_graph(
            &model,
            &mut tape,
            &pv,
            &obs,
            &actions,
            None,
            &LossConfig::default(),
        )
        .unwrap();
        tape.backward(g.loss).unwrap();
        let names = model.params.names();
        for (name, var) in names.iter().zip(pv.flatten()) {
            let grad = tape.grad(var);
            // The unused action row is the only permissible all-zero grad;
            // every parameter must at least participate in the graph.
            assert!(grad.is_some(), "no gradient for {name}");
        }
    }
}
