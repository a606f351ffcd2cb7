//! Model definition: linear observation encoder/decoder with scale heads,
//! action embedding, gated slot attention layers, and the latent decoder.
//!
//! The temporal core keeps, per layer and head, `mem_len` memory slots of
//! keys and values. Each step applies a sigmoid forget gate per slot, writes
//! the new key/value weighted by the complementary gate, and reads out with
//! a softmax over slot scores:
//!
//! ```text
//! K_t = diag(a_t) K_{t-1} + (1 - a_t) ⊗ k_t        (same for V_t)
//! h_t = V_t' softmax(K_t q_t)
//! ```
//!
//! The same recurrence admits a chunk-parallel form used for training: with
//! per-slot decay products `G_t = prod_{i<=t} a_i` inside a chunk,
//!
//! ```text
//! K_t q_t = G_t ⊙ (K_0 q_t) + G_t ⊙ Σ_{i<=t} (q_t·k_i) (1-a_i)/G_i
//! ```
//!
//! which turns into two matrix products plus a causal mask. Chunks are split
//! adaptively when the accumulated log-decay would make `1/G_i` overflow;
//! any chunking yields identical results, so this is purely a numeric guard.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{matmul_raw, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

pub const LN_EPS: f64 = 1e-5;
/// Chunk rows are cut when the in-chunk log-decay of any slot falls below
/// this, keeping `exp(-G)` comfortably inside f64 range.
const LOG_DECAY_SPLIT: f64 = -250.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GsaConfig {
    /// Hidden width D.
    pub hidden: usize,
    /// Layer count L.
    pub layers: usize,
    /// Attention heads.
    pub heads: usize,
    /// Memory slots per head.
    pub mem_len: usize,
    /// Chunk length for the parallel training form.
    pub chunk: usize,
    /// Raw observation width.
    pub obs_dim: usize,
    /// Discrete action count.
    pub num_actions: usize,
    /// Train the predicted-scale head; when false the predicted scale is
    /// fixed to 1.
    #[serde(default = "default_true")]
    pub train_sigma_head: bool,
}

fn default_true() -> bool {
    true
}

impl GsaConfig {
    /// CPU-friendly default; the larger published-scale setting remains a
    /// config choice away.
    pub fn desk_default() -> Self {
        GsaConfig {
            hidden: 64,
            layers: 2,
            heads: 4,
            mem_len: 32,
            chunk: 64,
            obs_dim: 4,
            num_actions: 2,
            train_sigma_head: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0
            || self.layers == 0
            || self.heads == 0
            || self.mem_len == 0
            || self.chunk == 0
            || self.obs_dim == 0
            || self.num_actions == 0
        {
            return Err(Error::Config("all model dimensions must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden ({}) must be divisible by heads ({})",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub wg: Vec<Tensor>,
    pub bg: Vec<Tensor>,
    pub wo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
}

#[derive(Debug, Clone)]
pub struct Params {
    pub enc_w: Tensor,
    pub enc_b: Tensor,
    pub enc_sig_w: Tensor,
    pub enc_sig_b: Tensor,
    pub act_embed: Tensor,
    pub act_w: Tensor,
    pub act_b: Tensor,
    pub layers: Vec<LayerParams>,
    pub dec_ln_g: Tensor,
    pub dec_ln_b: Tensor,
    pub dec_w1: Tensor,
    pub dec_b1: Tensor,
    pub dec_w2: Tensor,
    pub dec_b2: Tensor,
    pub dec_mean_w: Tensor,
    pub dec_mean_b: Tensor,
    pub dec_sig_w: Tensor,
    pub dec_sig_b: Tensor,
    pub obs_w: Tensor,
    pub obs_b: Tensor,
}

/// Inverse softplus of 1.0; scale heads start at unit scale.
const SIG_BIAS_INIT: f64 = 0.5413248546129181;

impl Params {
    fn init(cfg: &GsaConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.hidden;
        let dk = cfg.head_dim();
        let m = cfg.mem_len;
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                ln1_g: Tensor::filled(1, d, 1.0),
                ln1_b: Tensor::zeros(1, d),
                wq: (0..cfg.heads).map(|_| Tensor::randn_scaled(d, dk, d, rng)).collect(),
                wk: (0..cfg.heads).map(|_| Tensor::randn_scaled(d, dk, d, rng)).collect(),
                wv: (0..cfg.heads).map(|_| Tensor::randn_scaled(d, dk, d, rng)).collect(),
                wg: (0..cfg.heads).map(|_| Tensor::randn_scaled(d, m, d, rng)).collect(),
                // Positive bias: slots start retentive.
                bg: (0..cfg.heads).map(|_| Tensor::filled(1, m, 1.0)).collect(),
                wo: Tensor::randn_scaled(d, d, d, rng),
                ln2_g: Tensor::filled(1, d, 1.0),
                ln2_b: Tensor::zeros(1, d),
                ffn_w1: Tensor::randn_scaled(d, d, d, rng),
                ffn_b1: Tensor::zeros(1, d),
                ffn_w2: Tensor::randn_scaled(d, d, d, rng),
                ffn_b2: Tensor::zeros(1, d),
            })
            .collect();
        let mut enc_sig_w = Tensor::randn_scaled(cfg.obs_dim, d, cfg.obs_dim, rng);
        enc_sig_w.data.iter_mut().for_each(|v| *v *= 0.1);
        let mut dec_sig_w = Tensor::randn_scaled(d, d, d, rng);
        dec_sig_w.data.iter_mut().for_each(|v| *v *= 0.1);
        Params {
            enc_w: Tensor::randn_scaled(cfg.obs_dim, d, cfg.obs_dim, rng),
            enc_b: Tensor::zeros(1, d),
            enc_sig_w,
            enc_sig_b: Tensor::filled(1, d, SIG_BIAS_INIT),
            act_embed: Tensor::randn_scaled(cfg.num_actions, d, 1, rng),
            act_w: Tensor::randn_scaled(d, d, d, rng),
            act_b: Tensor::zeros(1, d),
            layers,
            dec_ln_g: Tensor::filled(1, d, 1.0),
            dec_ln_b: Tensor::zeros(1, d),
            dec_w1: Tensor::randn_scaled(d, d, d, rng),
            dec_b1: Tensor::zeros(1, d),
            dec_w2: Tensor::randn_scaled(d, d, d, rng),
            dec_b2: Tensor::zeros(1, d),
            dec_mean_w: Tensor::randn_scaled(d, d, d, rng),
            dec_mean_b: Tensor::zeros(1, d),
            dec_sig_w,
            dec_sig_b: Tensor::filled(1, d, SIG_BIAS_INIT),
            obs_w: Tensor::randn_scaled(d, cfg.obs_dim, d, rng),
            obs_b: Tensor::zeros(1, cfg.obs_dim),
        }
    }

    /// Visit every parameter in declaration order (the checkpoint and
    /// optimizer order).
    pub fn visit(&self, f: &mut impl FnMut(String, &Tensor)) {
        f("enc_w".into(), &self.enc_w);
        f("enc_b".into(), &self.enc_b);
        f("enc_sig_w".into(), &self.enc_sig_w);
        f("enc_sig_b".into(), &self.enc_sig_b);
        f("act_embed".into(), &self.act_embed);
        f("act_w".into(), &self.act_w);
        f("act_b".into(), &self.act_b);
        for (i, l) in self.layers.iter().enumerate() {
            f(format!("layer{i}.ln1_g"), &l.ln1_g);
            f(format!("layer{i}.ln1_b"), &l.ln1_b);
            for (h, t) in l.wq.iter().enumerate() {
                f(format!("layer{i}.head{h}.wq"), t);
            }
            for (h, t) in l.wk.iter().enumerate() {
                f(format!("layer{i}.head{h}.wk"), t);
            }
            for (h, t) in l.wv.iter().enumerate() {
                f(format!("layer{i}.head{h}.wv"), t);
            }
            for (h, t) in l.wg.iter().enumerate() {
                f(format!("layer{i}.head{h}.wg"), t);
            }
            for (h, t) in l.bg.iter().enumerate() {
                f(format!("layer{i}.head{h}.bg"), t);
            }
            f(format!("layer{i}.wo"), &l.wo);
            f(format!("layer{i}.ln2_g"), &l.ln2_g);
            f(format!("layer{i}.ln2_b"), &l.ln2_b);
            f(format!("layer{i}.ffn_w1"), &l.ffn_w1);
            f(format!("layer{i}.ffn_b1"), &l.ffn_b1);
            f(format!("layer{i}.ffn_w2"), &l.ffn_w2);
            f(format!("layer{i}.ffn_b2"), &l.ffn_b2);
        }
        f("dec_ln_g".into(), &self.dec_ln_g);
        f("dec_ln_b".into(), &self.dec_ln_b);
        f("dec_w1".into(), &self.dec_w1);
        f("dec_b1".into(), &self.dec_b1);
        f("dec_w2".into(), &self.dec_w2);
        f("dec_b2".into(), &self.dec_b2);
        f("dec_mean_w".into(), &self.dec_mean_w);
        f("dec_mean_b".into(), &self.dec_mean_b);
        f("dec_sig_w".into(), &self.dec_sig_w);
        f("dec_sig_b".into(), &self.dec_sig_b);
        f("obs_w".into(), &self.obs_w);
        f("obs_b".into(), &self.obs_b);
    }

    pub fn flatten(&self) -> Vec<&Tensor> {
        let mut out: Vec<*const Tensor> = Vec::new();
        self.visit(&mut |_, t| out.push(t as *const Tensor));
        // Safe: pointers reference fields of self with self's lifetime.
        out.into_iter().map(|p| unsafe { &*p }).collect()
    }

    pub fn flatten_mut(&mut self) -> Vec<&mut Tensor> {
        let mut ptrs: Vec<*mut Tensor> = Vec::new();
        {
            let mut collect = |t: &Tensor| ptrs.push(t as *const Tensor as *mut Tensor);
            self.visit(&mut |_, t| collect(t));
        }
        // Safe: visit yields each distinct field exactly once.
        ptrs.into_iter().map(|p| unsafe { &mut *p }).collect()
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |name, _| out.push(name));
        out
    }
}

/// Tape handles for every parameter, field-for-field with [`Params`].
pub(crate) struct LayerParamVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Vec<Var>,
    pub wk: Vec<Var>,
    pub wv: Vec<Var>,
    pub wg: Vec<Var>,
    pub bg: Vec<Var>,
    pub wo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
}

pub(crate) struct ParamVars {
    pub enc_w: Var,
    pub enc_b: Var,
    pub enc_sig_w: Var,
    pub enc_sig_b: Var,
    pub act_embed: Var,
    pub act_w: Var,
    pub act_b: Var,
    pub layers: Vec<LayerParamVars>,
    pub dec_ln_g: Var,
    pub dec_ln_b: Var,
    pub dec_w1: Var,
    pub dec_b1: Var,
    pub dec_w2: Var,
    pub dec_b2: Var,
    pub dec_mean_w: Var,
    pub dec_mean_b: Var,
    pub dec_sig_w: Var,
    pub dec_sig_b: Var,
    pub obs_w: Var,
    pub obs_b: Var,
}

impl ParamVars {
    pub(crate) fn bind(params: &Params, tape: &mut Tape, trainable: bool) -> Self {
        let mut mk = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        ParamVars {
            enc_w: mk(&params.enc_w),
            enc_b: mk(&params.enc_b),
            enc_sig_w: mk(&params.enc_sig_w),
            enc_sig_b: mk(&params.enc_sig_b),
            act_embed: mk(&params.act_embed),
            act_w: mk(&params.act_w),
            act_b: mk(&params.act_b),
            layers: params
                .layers
                .iter()
                .map(|l| LayerParamVars {
                    ln1_g: mk(&l.ln1_g),
                    ln1_b: mk(&l.ln1_b),
                    wq: l.wq.iter().map(&mut mk).collect(),
                    wk: l.wk.iter().map(&mut mk).collect(),
                    wv: l.wv.iter().map(&mut mk).collect(),
                    wg: l.wg.iter().map(&mut mk).collect(),
                    bg: l.bg.iter().map(&mut mk).collect(),
                    wo: mk(&l.wo),
                    ln2_g: mk(&l.ln2_g),
                    ln2_b: mk(&l.ln2_b),
                    ffn_w1: mk(&l.ffn_w1),
                    ffn_b1: mk(&l.ffn_b1),
                    ffn_w2: mk(&l.ffn_w2),
                    ffn_b2: mk(&l.ffn_b2),
                })
                .collect(),
            dec_ln_g: mk(&params.dec_ln_g),
            dec_ln_b: mk(&params.dec_ln_b),
            dec_w1: mk(&params.dec_w1),
            dec_b1: mk(&params.dec_b1),
            dec_w2: mk(&params.dec_w2),
            dec_b2: mk(&params.dec_b2),
            dec_mean_w: mk(&params.dec_mean_w),
            dec_mean_b: mk(&params.dec_mean_b),
            dec_sig_w: mk(&params.dec_sig_w),
            dec_sig_b: mk(&params.dec_sig_b),
            obs_w: mk(&params.obs_w),
            obs_b: mk(&params.obs_b),
        }
    }

    /// Vars in the same order as [`Params::flatten`].
    pub(crate) fn flatten(&self) -> Vec<Var> {
        let mut out = vec![
            self.enc_w,
            self.enc_b,
            self.enc_sig_w,
            self.enc_sig_b,
            self.act_embed,
            self.act_w,
            self.act_b,
        ];
        for l in &self.layers {
            out.push(l.ln1_g);
            out.push(l.ln1_b);
            out.extend(&l.wq);
            out.extend(&l.wk);
            out.extend(&l.wv);
            out.extend(&l.wg);
            out.extend(&l.bg);
            out.push(l.wo);
            out.push(l.ln2_g);
            out.push(l.ln2_b);
            out.push(l.ffn_w1);
            out.push(l.ffn_b1);
            out.push(l.ffn_w2);
            out.push(l.ffn_b2);
        }
        out.extend([
            self.dec_ln_g,
            self.dec_ln_b,
            self.dec_w1,
            self.dec_b1,
            self.dec_w2,
            self.dec_b2,
            self.dec_mean_w,
            self.dec_mean_b,
            self.dec_sig_w,
            self.dec_sig_b,
            self.obs_w,
            self.obs_b,
        ]);
        out
    }
}

/// Per-head slot memory plus the accumulated per-slot log decay.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadState {
    pub k_slots: Tensor,
    pub v_slots: Tensor,
    pub log_decay: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub heads: Vec<HeadState>,
}

/// The recurrent memory; its size is fixed by the config, independent of how
/// much context has been consumed.
#[derive(Debug, Clone, PartialEq)]
pub struct GsaState {
    pub layers: Vec<LayerState>,
}

impl GsaState {
    pub fn flat_len(cfg: &GsaConfig) -> usize {
        cfg.layers * cfg.heads * (2 * cfg.mem_len * cfg.head_dim() + cfg.mem_len)
    }

    /// Flatten one layer's memory (keys, values, log decay) for export.
    pub fn flatten_layer(&self, layer: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for h in &self.layers[layer].heads {
            out.extend_from_slice(&h.k_slots.data);
            out.extend_from_slice(&h.v_slots.data);
            out.extend_from_slice(&h.log_decay.data);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.heads.iter().all(|h| {
                h.k_slots.is_finite() && h.v_slots.is_finite() && h.log_decay.is_finite()
            })
        })
    }
}

#[derive(Debug, Clone)]
pub struct GsaModel {
    pub config: GsaConfig,
    pub params: Params,
}

impl GsaModel {
    pub fn new(config: GsaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng_at(seed, &[0x6e17]);
        let params = Params::init(&config, &mut r);
        Ok(GsaModel { config, params })
    }

    pub fn initial_state(&self) -> GsaState {
        let dk = self.config.head_dim();
        GsaState {
            layers: (0..self.config.layers)
                .map(|_| LayerState {
                    heads: (0..self.config.heads)
                        .map(|_| HeadState {
                            k_slots: Tensor::zeros(self.config.mem_len, dk),
                            v_slots: Tensor::zeros(self.config.mem_len, dk),
                            log_decay: Tensor::zeros(1, self.config.mem_len),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    // -- value-path building blocks ----------------------------------------

    /// Linear encoder and softplus scale head for one raw observation.
    pub fn encode_obs(&self, obs: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if obs.len() != self.config.obs_dim {
            return Err(Error::Contract(format!(
                "observation width {} != obs_dim {}",
                obs.len(),
                self.config.obs_dim
            )));
        }
        let o = Tensor::from_vec(1, obs.len(), obs.to_vec());
        let mean = affine(&o, &self.params.enc_w, &self.params.enc_b);
        let mut sig = affine(&o, &self.params.enc_sig_w, &self.params.enc_sig_b);
        sig.data.iter_mut().for_each(|v| *v = softplus_s(*v));
        Ok((mean.data, sig.data))
    }

    /// Linear map from a predicted latent back to observation space.
    pub fn decode_obs(&self, s_hat: &[f64]) -> Result<Vec<f64>> {
        if s_hat.len() != self.config.hidden {
            return Err(Error::Contract("latent width mismatch".into()));
        }
        let s = Tensor::from_vec(1, s_hat.len(), s_hat.to_vec());
        Ok(affine(&s, &self.params.obs_w, &self.params.obs_b).data)
    }

    /// Embedding lookup plus one nonlinear layer.
    pub fn encode_action(&self, action: usize) -> Result<Vec<f64>> {
        if action >= self.config.num_actions {
            return Err(Error::Contract(format!("action {action} out of range")));
        }
        let row =
            Tensor::from_vec(1, self.config.hidden, self.params.act_embed.row(action).to_vec());
        let mut u = affine(&row, &self.params.act_w, &self.params.act_b);
        u.data.iter_mut().for_each(|v| *v = silu_s(*v));
        Ok(u.data)
    }

    /// Residual MLP with layer normalization, then mean and scale heads.
    pub fn decode_latent(&self, h: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if h.len() != self.config.hidden {
            return Err(Error::Contract("hidden width mismatch".into()));
        }
        let ht = Tensor::from_vec(1, h.len(), h.to_vec());
        let core = self.latent_core(&ht);
        let mean = affine(&core, &self.params.dec_mean_w, &self.params.dec_mean_b);
        let sig = if self.config.train_sigma_head {
            let mut s = affine(&core, &self.params.dec_sig_w, &self.params.dec_sig_b);
            s.data.iter_mut().for_each(|v| *v = softplus_s(*v));
            s
        } else {
            Tensor::filled(1, self.config.hidden, 1.0)
        };
        Ok((mean.data, sig.data))
    }

    fn latent_core(&self, h: &Tensor) -> Tensor {
        let u = ln_affine(h, &self.params.dec_ln_g, &self.params.dec_ln_b);
        let mut f = affine(&u, &self.params.dec_w1, &self.params.dec_b1);
        f.data.iter_mut().for_each(|v| *v = silu_s(*v));
        let mut core = affine(&f, &self.params.dec_w2, &self.params.dec_b2);
        for (c, &hv) in core.data.iter_mut().zip(&h.data) {
            *c += hv;
        }
        core
    }

    /// One recurrent step: gated decay, key/value write, softmax readout over
    /// slots, then the feed-forward sublayer, for each layer.
    pub fn forward_recurrent(
        &self,
        state: &GsaState,
        latent: &[f64],
        action: usize,
    ) -> Result<(Vec<f64>, GsaState)> {
        if latent.len() != self.config.hidden {
            return Err(Error::Contract("latent width mismatch".into()));
        }
        if state.layers.len() != self.config.layers {
            return Err(Error::Contract("state layer count mismatch".into()));
        }
        let a_emb = self.encode_action(action)?;
        let mut x = Tensor::from_vec(1, self.config.hidden, latent.to_vec());
        for (xv, av) in x.data.iter_mut().zip(&a_emb) {
            *xv += av;
        }
        let mut next = state.clone();
        for (li, layer) in self.params.layers.iter().enumerate() {
            x = self.layer_step(&mut next.layers[li], layer, &x)?;
        }
        Ok((x.data, next))
    }

    fn layer_step(
        &self,
        state: &mut LayerState,
        layer: &LayerParams,
        x: &Tensor,
    ) -> Result<Tensor> {
        let dk = self.config.head_dim();
        let m = self.config.mem_len;
        let u = ln_affine(x, &layer.ln1_g, &layer.ln1_b);
        let mut heads_out = Tensor::zeros(1, self.config.hidden);
        for h in 0..self.config.heads {
            let hs = &mut state.heads[h];
            let q = matmul_raw(&u, false, &layer.wq[h], false);
            let k = matmul_raw(&u, false, &layer.wk[h], false);
            let v = matmul_raw(&u, false, &layer.wv[h], false);
            let z = affine(&u, &layer.wg[h], &layer.bg[h]);
            // Gated decay plus write.
            for j in 0..m {
                let alpha = sigmoid_s(z.data[j]);
                let write = 1.0 - alpha;
                for c in 0..dk {
                    let kv = hs.k_slots.at(j, c);
                    *hs.k_slots.at_mut(j, c) = alpha * kv + write * k.data[c];
                    let vv = hs.v_slots.at(j, c);
                    *hs.v_slots.at_mut(j, c) = alpha * vv + write * v.data[c];
                }
                hs.log_decay.data[j] += log_sigmoid_s(z.data[j]);
            }
            // Softmax readout over slots.
            let mut scores = vec![0.0; m];
            for (j, s) in scores.iter_mut().enumerate() {
                let mut acc = 0.0;
                for c in 0..dk {
                    acc += hs.k_slots.at(j, c) * q.data[c];
                }
                *s = acc;
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut zsum = 0.0;
            for s in &mut scores {
                *s = (*s - mx).exp();
                zsum += *s;
            }
            for s in &mut scores {
                *s /= zsum;
            }
            for c in 0..dk {
                let mut acc = 0.0;
                for j in 0..m {
                    acc += scores[j] * hs.v_slots.at(j, c);
                }
                heads_out.data[h * dk + c] = acc;
            }
        }
        let mut x2 = matmul_raw(&heads_out, false, &layer.wo, false);
        for (a, &b) in x2.data.iter_mut().zip(&x.data) {
            *a += b;
        }
        let u2 = ln_affine(&x2, &layer.ln2_g, &layer.ln2_b);
        let mut f = affine(&u2, &layer.ffn_w1, &layer.ffn_b1);
        f.data.iter_mut().for_each(|v| *v = silu_s(*v));
        let mut x3 = matmul_raw(&f, false, &layer.ffn_w2, false);
        for (a, (&b, &c)) in x3.data.iter_mut().zip(x2.data.iter().zip(&layer.ffn_b2.data)) {
            *a += b + c;
        }
        Ok(x3)
    }

    /// Chunk-parallel forward over a whole sequence of latent inputs and
    /// actions. Masked positions replace the ground-truth latent with the
    /// model's own previous-step prediction. Returns every step's output and
    /// the final memory.
    pub fn forward_chunkwise(
        &self,
        latents: &Tensor,
        actions: &[usize],
        mask: Option<&[bool]>,
    ) -> Result<(Tensor, GsaState)> {
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&self.params, &mut tape, false);
        let lat = tape.constant(latents.clone());
        let (h, state) = self.forward_graph(&mut tape, &pv, lat, actions, mask)?;
        Ok((tape.value(h).clone(), state))
    }

    /// Graph-building forward shared by training and `forward_chunkwise`.
    pub(crate) fn forward_graph(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        latents: Var,
        actions: &[usize],
        mask: Option<&[bool]>,
    ) -> Result<(Var, GsaState)> {
        let t_len = tape.value(latents).rows();
        if actions.len() != t_len {
            return Err(Error::Contract(format!(
                "got {} actions for {} latent steps",
                actions.len(),
                t_len
            )));
        }
        if let Some(m) = mask {
            if m.len() != t_len {
                return Err(Error::Contract("mask length mismatch".into()));
            }
        }
        if !tape.value(latents).is_finite() {
            return Err(Error::Contract("non-finite latent input".into()));
        }
        if actions.iter().any(|&a| a >= self.config.num_actions) {
            return Err(Error::Contract("action out of range".into()));
        }
        if t_len == 0 {
            return Ok((tape.constant(Tensor::zeros(0, self.config.hidden)), self.initial_state()));
        }

        let act_all = self.action_embed_graph(tape, pv, actions);

        // Memory vars per layer per head, starting from zeros.
        let dk = self.config.head_dim();
        let mut kmems: Vec<Vec<Var>> = Vec::with_capacity(self.config.layers);
        let mut vmems: Vec<Vec<Var>> = Vec::with_capacity(self.config.layers);
        for _ in 0..self.config.layers {
            let mut ks = Vec::with_capacity(self.config.heads);
            let mut vs = Vec::with_capacity(self.config.heads);
            for _ in 0..self.config.heads {
                ks.push(tape.constant(Tensor::zeros(self.config.mem_len, dk)));
                vs.push(tape.constant(Tensor::zeros(self.config.mem_len, dk)));
            }
            kmems.push(ks);
            vmems.push(vs);
        }
        let mut log_decays =
            vec![vec![Tensor::zeros(1, self.config.mem_len); self.config.heads]; self.config.layers];

        // Segment at masked positions; position 0 is never substituted.
        let mut seg_starts = vec![0usize];
        if let Some(m) = mask {
            for (t, &bit) in m.iter().enumerate().skip(1) {
                if bit {
                    seg_starts.push(t);
                }
            }
        }
        seg_starts.push(t_len);

        let mut h_parts: Vec<Var> = Vec::new();
        let mut last_h_row: Option<Var> = None;
        let mut tri_cache: Vec<Option<Var>> = vec![None; self.config.chunk + 1];

        for w in seg_starts.windows(2) {
            let (start, end) = (w[0], w[1]);
            let len = end - start;
            let masked_first = mask.map_or(false, |m| m[start]) && start > 0;
            let x0 = if masked_first {
                let prev = last_h_row.expect("segment after first always has history");
                let (s_hat, _) = self.latent_decode_graph(tape, pv, prev);
                let a_row = tape.slice_rows(act_all, start, 1);
                let first = tape.add(s_hat, a_row);
                if len > 1 {
                    let rest_s = tape.slice_rows(latents, start + 1, len - 1);
                    let rest_a = tape.slice_rows(act_all, start + 1, len - 1);
                    let rest = tape.add(rest_s, rest_a);
                    tape.concat_rows(&[first, rest])
                } else {
                    first
                }
            } else {
                let s = tape.slice_rows(latents, start, len);
                let a = tape.slice_rows(act_all, start, len);
                tape.add(s, a)
            };

            let mut x = x0;
            for li in 0..self.config.layers {
                x = self.layer_chunked_graph(
                    tape,
                    &pv.layers[li],
                    x,
                    &mut kmems[li],
                    &mut vmems[li],
                    &mut log_decays[li],
                    &mut tri_cache,
                )?;
            }
            last_h_row = Some(tape.slice_rows(x, len - 1, 1));
            h_parts.push(x);
        }

        let h = if h_parts.len() == 1 { h_parts[0] } else { tape.concat_rows(&h_parts) };

        let final_state = GsaState {
            layers: (0..self.config.layers)
                .map(|li| LayerState {
                    heads: (0..self.config.heads)
                        .map(|hi| HeadState {
                            k_slots: tape.value(kmems[li][hi]).clone(),
                            v_slots: tape.value(vmems[li][hi]).clone(),
                            log_decay: log_decays[li][hi].clone(),
                        })
                        .collect(),
                })
                .collect(),
        };
        Ok((h, final_state))
    }

    /// One layer over one segment, processed in (adaptively split) chunks.
    #[allow(clippy::too_many_arguments)]
    fn layer_chunked_graph(
        &self,
        tape: &mut Tape,
        lp: &LayerParamVars,
        x: Var,
        kmems: &mut [Var],
        vmems: &mut [Var],
        log_decays: &mut [Tensor],
        tri_cache: &mut Vec<Option<Var>>,
    ) -> Result<Var> {
        let len = tape.value(x).rows();
        let mut outs: Vec<Var> = Vec::new();
        let mut pos = 0;
        while pos < len {
            let max_c = self.config.chunk.min(len - pos);
            let c = self.prescan_chunk_len(tape, lp, x, pos, max_c);
            let xc = tape.slice_rows(x, pos, c);
            let out = self.chunk_graph(tape, lp, xc, kmems, vmems, log_decays, tri_cache)?;
            outs.push(out);
            pos += c;
        }
        Ok(if outs.len() == 1 { outs[0] } else { tape.concat_rows(&outs) })
    }

    /// Value-level scan of gate pre-activations: the chunk ends early if any
    /// slot's accumulated log decay would pass the overflow guard.
    fn prescan_chunk_len(
        &self,
        tape: &Tape,
        lp: &LayerParamVars,
        x: Var,
        pos: usize,
        max_c: usize,
    ) -> usize {
        if max_c <= 1 {
            return max_c;
        }
        let xv = tape.value(x);
        let m = self.config.mem_len;
        let mut acc = vec![0.0; self.config.heads * m];
        for (step, r) in (pos..pos + max_c).enumerate() {
            let row = Tensor::from_vec(1, xv.cols(), xv.row(r).to_vec());
            let ln1_g = tape.value(lp.ln1_g);
            let ln1_b = tape.value(lp.ln1_b);
            let u = ln_affine(&row, ln1_g, ln1_b);
            for h in 0..self.config.heads {
                let z = affine(&u, tape.value(lp.wg[h]), tape.value(lp.bg[h]));
                for j in 0..m {
                    acc[h * m + j] += log_sigmoid_s(z.data[j]);
                }
            }
            if acc.iter().any(|&a| a < LOG_DECAY_SPLIT) {
                // Keep at least one row per chunk.
                return step.max(1);
            }
        }
        max_c
    }

    /// The chunk-parallel attention + feed-forward block.
    fn chunk_graph(
        &self,
        tape: &mut Tape,
        lp: &LayerParamVars,
        x: Var,
        kmems: &mut [Var],
        vmems: &mut [Var],
        log_decays: &mut [Tensor],
        tri_cache: &mut Vec<Option<Var>>,
    ) -> Result<Var> {
        let c = tape.value(x).rows();
        let tri = match &tri_cache[c] {
            Some(v) => *v,
            None => {
                let v = tape.constant(Tensor::lower_triangular(c));
                tri_cache[c] = Some(v);
                v
            }
        };
        let ln = tape.layer_norm_rows(x, LN_EPS);
        let scaled = tape.mul_row(ln, lp.ln1_g);
        let u = tape.add_row(scaled, lp.ln1_b);

        let mut head_outs = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let q = tape.matmul(u, lp.wq[h]);
            let k = tape.matmul(u, lp.wk[h]);
            let v = tape.matmul(u, lp.wv[h]);
            let z_lin = tape.matmul(u, lp.wg[h]);
            let z = tape.add_row(z_lin, lp.bg[h]);
            let la = tape.log_sigmoid(z);
            let g = tape.cumsum_rows(la);
            let gamma = tape.exp(g);
            let neg_z = tape.scale(z, -1.0);
            let l1m = tape.log_sigmoid(neg_z); // log(1 - alpha)
            let lb = tape.sub(l1m, g);
            let b = tape.exp(lb); // (1 - alpha_i) / Gamma_i

            let base = tape.matmul_t(q, false, kmems[h], true);
            let d0 = tape.matmul_t(q, false, k, true);
            let d0m = tape.mul(d0, tri);
            let intra = tape.matmul(d0m, b);
            let s_pre = tape.add(base, intra);
            let s = tape.mul(gamma, s_pre);
            let p = tape.softmax_rows(s);
            let wgt = tape.mul(p, gamma);
            let e = tape.matmul_t(wgt, false, b, true);
            let em = tape.mul(e, tri);
            let o_state = tape.matmul(wgt, vmems[h]);
            let o_intra = tape.matmul(em, v);
            head_outs.push(tape.add(o_state, o_intra));

            // Memory advance to the chunk end.
            let g_last = tape.slice_rows(g, c - 1, 1);
            let gamma_last = tape.exp(g_last);
            let gamma_col = tape.transpose(gamma_last);
            let btk = tape.matmul_t(b, true, k, false);
            let ksum = tape.add(kmems[h], btk);
            kmems[h] = tape.mul_col(ksum, gamma_col);
            let btv = tape.matmul_t(b, true, v, false);
            let vsum = tape.add(vmems[h], btv);
            vmems[h] = tape.mul_col(vsum, gamma_col);
            for (acc, &add) in log_decays[h].data.iter_mut().zip(&tape.value(g_last).data) {
                *acc += add;
            }
        }

        let heads = if head_outs.len() == 1 { head_outs[0] } else { tape.concat_cols(&head_outs) };
        let proj = tape.matmul(heads, lp.wo);
        let x2 = tape.add(x, proj);
        let ln2 = tape.layer_norm_rows(x2, LN_EPS);
        let ln2s = tape.mul_row(ln2, lp.ln2_g);
        let u2 = tape.add_row(ln2s, lp.ln2_b);
        let f_lin = tape.matmul(u2, lp.ffn_w1);
        let f_b = tape.add_row(f_lin, lp.ffn_b1);
        let f = tape.silu(f_b);
        let f2 = tape.matmul(f, lp.ffn_w2);
        let f2b = tape.add_row(f2, lp.ffn_b2);
        Ok(tape.add(x2, f2b))
    }

    // -- graph-side encoder/decoder pieces ----------------------------------

    pub(crate) fn encode_obs_graph(&self, tape: &mut Tape, pv: &ParamVars, obs: Var) -> (Var, Var) {
        let lin = tape.matmul(obs, pv.enc_w);
        let mean = tape.add_row(lin, pv.enc_b);
        let slin = tape.matmul(obs, pv.enc_sig_w);
        let sraw = tape.add_row(slin, pv.enc_sig_b);
        let sig = tape.softplus(sraw);
        (mean, sig)
    }

    pub(crate) fn action_embed_graph(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        actions: &[usize],
    ) -> Var {
        let rows = tape.select_rows(pv.act_embed, actions);
        let lin = tape.matmul(rows, pv.act_w);
        let biased = tape.add_row(lin, pv.act_b);
        tape.silu(biased)
    }

    pub(crate) fn latent_decode_graph(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        h: Var,
    ) -> (Var, Var) {
        let ln = tape.layer_norm_rows(h, LN_EPS);
        let lns = tape.mul_row(ln, pv.dec_ln_g);
        let u = tape.add_row(lns, pv.dec_ln_b);
        let f_lin = tape.matmul(u, pv.dec_w1);
        let f_b = tape.add_row(f_lin, pv.dec_b1);
        let f = tape.silu(f_b);
        let c_lin = tape.matmul(f, pv.dec_w2);
        let c_b = tape.add_row(c_lin, pv.dec_b2);
        let core = tape.add(h, c_b);
        let m_lin = tape.matmul(core, pv.dec_mean_w);
        let mean = tape.add_row(m_lin, pv.dec_mean_b);
        let sig = if self.config.train_sigma_head {
            let s_lin = tape.matmul(core, pv.dec_sig_w);
            let s_raw = tape.add_row(s_lin, pv.dec_sig_b);
            tape.softplus(s_raw)
        } else {
            let rows = tape.value(h).rows();
            tape.constant(Tensor::filled(rows, self.config.hidden, 1.0))
        };
        (mean, sig)
    }

    pub(crate) fn decode_obs_graph(&self, tape: &mut Tape, pv: &ParamVars, s_hat: Var) -> Var {
        let lin = tape.matmul(s_hat, pv.obs_w);
        tape.add_row(lin, pv.obs_b)
    }
}

// Scalar helpers shared by the value paths.

fn sigmoid_s(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid_s(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn softplus_s(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn silu_s(x: f64) -> f64 {
    x * sigmoid_s(x)
}

fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut out = matmul_raw(x, false, w, false);
    for r in 0..out.rows() {
        for c in 0..out.cols() {
            *out.at_mut(r, c) += b.at(0, c);
        }
    }
    out
}

fn ln_affine(x: &Tensor, g: &Tensor, b: &Tensor) -> Tensor {
    let (rows, cols) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(rows, cols);
    for i in 0..rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..cols {
            *out.at_mut(i, j) = (row[j] - mean) * inv * g.at(0, j) + b.at(0, j);
        }
    }
    out
}
