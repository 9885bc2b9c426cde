//! Minimal decoder-only transformer with an externalized key-value history.
//!
//! The model exposes exactly one unit of computation: `step`, which consumes
//! a token and the history matrix and returns next-token logits plus the
//! extended history. The history is the only cross-step state, so additive
//! perturbations of it fully determine controlled generation. Stepping can
//! record a [`RolloutTape`], and [`LmParams::backward_rollout`] propagates
//! loss gradients from per-step logits back into the model weights and into
//! any perturbation applied to the history.
//!
//! All arithmetic is `f64`; forward and backward are exact enough for
//! central-finite-difference verification at `h = 1e-5`.

mod backward;
mod sample;
mod train;

pub use sample::{argmax_decode, sample_sequence, sequence_log_prob, SampleOptions};
pub(crate) use sample::teacher_fed_tokens;
pub use train::{heldout_perplexity, mean_nll, train_lm, AdamState, TrainConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GycError, Result};
use crate::math::{dot, softmax, Mat};
use crate::perturb::Perturbation;
use crate::vocab::TokenId;

const RMS_EPS: f64 = 1e-6;

/// Architecture dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub head_dim: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: 2 layers, 4 heads, width 64, context 24.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            head_dim: 16,
            d_ff: 256,
            vocab_size,
            max_seq_len: 24,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.n_heads == 0
            || self.d_model == 0
            || self.head_dim == 0
            || self.d_ff == 0
            || self.max_seq_len == 0
        {
            return Err(GycError::InvalidConfig("all dimensions must be positive".into()));
        }
        if self.d_model != self.n_heads * self.head_dim {
            return Err(GycError::InvalidConfig(format!(
                "d_model {} != n_heads {} * head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        if self.vocab_size <= crate::vocab::NUM_RESERVED {
            return Err(GycError::InvalidConfig(
                "vocab_size must exceed the reserved tokens".into(),
            ));
        }
        Ok(())
    }
}

/// Per-layer weight matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub fc1: Mat,
    pub fc2: Mat,
}

/// Full parameter set. The token embedding doubles as the output head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmParams {
    pub config: ModelConfig,
    pub wte: Mat,
    pub wpe: Mat,
    pub layers: Vec<LayerParams>,
}

impl LmParams {
    /// Gaussian init (std 0.02); output projections start at zero so an
    /// untrained model produces near-uniform logits.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let std = 0.02;
        let wte = Mat::randn(config.vocab_size, d, std, &mut rng);
        let wpe = Mat::randn(config.max_seq_len, d, std, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                wq: Mat::randn(d, d, std, &mut rng),
                wk: Mat::randn(d, d, std, &mut rng),
                wv: Mat::randn(d, d, std, &mut rng),
                wo: Mat::zeros(d, d),
                fc1: Mat::randn(config.d_ff, d, std, &mut rng),
                fc2: Mat::zeros(d, config.d_ff),
            })
            .collect();
        Ok(LmParams { config, wte, wpe, layers })
    }

    /// Same shapes, all zeros; used as a gradient/moment buffer.
    pub fn zeros_like(&self) -> Self {
        let mut p = self.clone();
        p.wte.fill(0.0);
        p.wpe.fill(0.0);
        for l in &mut p.layers {
            l.wq.fill(0.0);
            l.wk.fill(0.0);
            l.wv.fill(0.0);
            l.wo.fill(0.0);
            l.fc1.fill(0.0);
            l.fc2.fill(0.0);
        }
        p
    }

    pub(crate) fn mats(&self) -> Vec<&Mat> {
        let mut v = vec![&self.wte, &self.wpe];
        for l in &self.layers {
            v.extend([&l.wq, &l.wk, &l.wv, &l.wo, &l.fc1, &l.fc2]);
        }
        v
    }

    pub(crate) fn mats_mut(&mut self) -> Vec<&mut Mat> {
        let mut v: Vec<&mut Mat> = vec![&mut self.wte, &mut self.wpe];
        for l in &mut self.layers {
            v.push(&mut l.wq);
            v.push(&mut l.wk);
            v.push(&mut l.wv);
            v.push(&mut l.wo);
            v.push(&mut l.fc1);
            v.push(&mut l.fc2);
        }
        v
    }

    /// Token embedding row (also used as the default sentence embedder).
    pub fn token_embedding(&self, id: TokenId) -> &[f64] {
        self.wte.row(id)
    }

    /// One decoding step without perturbation or trace.
    pub fn step(&self, token: TokenId, history: &mut HistoryMatrix) -> Result<Vec<f64>> {
        self.step_full(token, history, None, None)
    }

    /// One decoding step. `delta`, when present, is added to every history
    /// position it covers at attention-read time, realizing perturbed
    /// stepping without mutating the stored history. `tape`, when present,
    /// records the activations needed by [`Self::backward_rollout`].
    pub fn step_full(
        &self,
        token: TokenId,
        history: &mut HistoryMatrix,
        delta: Option<&Perturbation>,
        tape: Option<&mut RolloutTape>,
    ) -> Result<Vec<f64>> {
        let cfg = &self.config;
        if token >= cfg.vocab_size {
            return Err(GycError::InvalidArgument(format!(
                "token id {token} out of range (vocab size {})",
                cfg.vocab_size
            )));
        }
        if history.n_layers() != cfg.n_layers {
            return Err(GycError::ShapeMismatch(format!(
                "history has {} layers, model has {}",
                history.n_layers(),
                cfg.n_layers
            )));
        }
        let pos = history.len();
        if pos >= cfg.max_seq_len {
            return Err(GycError::ContextOverflow { len: pos, max: cfg.max_seq_len });
        }
        if let Some(d) = delta {
            d.check_compatible(cfg)?;
        }

        let dmod = cfg.d_model;
        let (nh, dh) = (cfg.n_heads, cfg.head_dim);
        let scale = (dh as f64).sqrt();

        let mut x: Vec<f64> = self
            .wte
            .row(token)
            .iter()
            .zip(self.wpe.row(pos))
            .map(|(a, b)| a + b)
            .collect();

        let mut layer_traces = Vec::with_capacity(cfg.n_layers);
        for (l, lp) in self.layers.iter().enumerate() {
            let x_pre_attn = x.clone();
            let (xn_a, inv_rms_a) = rmsnorm(&x);
            let q = lp.wq.matvec(&xn_a);
            let k_new = lp.wk.matvec(&xn_a);
            let v_new = lp.wv.matvec(&xn_a);
            history.layers[l].keys.push(k_new);
            history.layers[l].values.push(v_new);
            let t_len = pos + 1;
            let keys = &history.layers[l].keys;
            let values = &history.layers[l].values;

            let mut aw_heads = Vec::with_capacity(nh);
            let mut ho = vec![0.0; dmod];
            for h in 0..nh {
                let hs = h * dh;
                let qh = &q[hs..hs + dh];
                let mut alog = vec![0.0; t_len];
                for (j, a) in alog.iter_mut().enumerate() {
                    let mut s = dot(qh, &keys[j][hs..hs + dh]);
                    if let Some(dk) = delta.and_then(|d| d.delta_k(l, j)) {
                        s += dot(qh, &dk[hs..hs + dh]);
                    }
                    *a = s / scale;
                }
                let aw = softmax(&alog);
                for i in 0..dh {
                    let mut acc = 0.0;
                    for (j, &w) in aw.iter().enumerate() {
                        let mut v = values[j][hs + i];
                        if let Some(dv) = delta.and_then(|d| d.delta_v(l, j)) {
                            v += dv[hs + i];
                        }
                        acc += w * v;
                    }
                    ho[hs + i] = acc;
                }
                aw_heads.push(aw);
            }
            let attn_out = lp.wo.matvec(&ho);
            let x_post_attn: Vec<f64> =
                x_pre_attn.iter().zip(&attn_out).map(|(a, b)| a + b).collect();

            let (xn_m, inv_rms_m) = rmsnorm(&x_post_attn);
            let h1 = lp.fc1.matvec(&xn_m);
            let act: Vec<f64> = h1.iter().map(|&v| silu(v)).collect();
            let mlp_out = lp.fc2.matvec(&act);
            x = x_post_attn.iter().zip(&mlp_out).map(|(a, b)| a + b).collect();

            if tape.is_some() {
                layer_traces.push(LayerTrace {
                    x_pre_attn,
                    xn_a,
                    inv_rms_a,
                    q,
                    aw: aw_heads,
                    ho,
                    x_post_attn,
                    xn_m,
                    inv_rms_m,
                    h1,
                    act,
                });
            }
        }

        let logits = self.wte.matvec(&x);
        if let Some(tape) = tape {
            tape.positions.push(PosTrace {
                token,
                pos,
                layers: layer_traces,
                x_final: x,
                logits: logits.clone(),
            });
        }
        Ok(logits)
    }

    /// Feeds `tokens` in order, returning the trace and the raw history.
    /// Row `t` of the trace holds the logits produced after feeding
    /// `tokens[t]`, i.e. the distribution over the token at position `t+1`.
    pub fn rollout(
        &self,
        tokens: &[TokenId],
        delta: Option<&Perturbation>,
    ) -> Result<(RolloutTape, HistoryMatrix)> {
        let mut tape = RolloutTape::default();
        let mut history = HistoryMatrix::empty(self.config.n_layers);
        for &tok in tokens {
            self.step_full(tok, &mut history, delta, Some(&mut tape))?;
        }
        Ok((tape, history))
    }
}

#[inline]
fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn silu_deriv(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

pub(crate) fn rmsnorm(x: &[f64]) -> (Vec<f64>, f64) {
    let ms = dot(x, x) / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    (x.iter().map(|v| v * inv).collect(), inv)
}

/// Backward of `y = x * inv_rms(x)` given the saved `inv` factor.
pub(crate) fn rmsnorm_inv_backward(dy: &[f64], x: &[f64], inv: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let proj: f64 = dot(dy, x);
    let c = inv * inv * inv / n * proj;
    dy.iter().zip(x).map(|(dy_i, x_i)| inv * dy_i - c * x_i).collect()
}

/// Key-value caches of every layer; the "history matrix" the model steps on.
///
/// Entry `j` of layer `l` stores the flattened per-head key and value rows
/// of position `j` (head `h` occupies `h*head_dim..(h+1)*head_dim`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryMatrix {
    pub layers: Vec<LayerKv>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerKv {
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

impl HistoryMatrix {
    pub fn empty(n_layers: usize) -> Self {
        HistoryMatrix { layers: vec![LayerKv::default(); n_layers] }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Shared position count `t`. All layers advance in lockstep.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.keys.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks the cross-layer length and width invariants.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.n_layers {
            return Err(GycError::ShapeMismatch("layer count mismatch".into()));
        }
        let t = self.len();
        for (i, l) in self.layers.iter().enumerate() {
            if l.keys.len() != t || l.values.len() != t {
                return Err(GycError::ShapeMismatch(format!(
                    "layer {i} length differs from layer 0"
                )));
            }
            for row in l.keys.iter().chain(l.values.iter()) {
                if row.len() != config.d_model {
                    return Err(GycError::ShapeMismatch(format!(
                        "layer {i} row width {} != d_model {}",
                        row.len(),
                        config.d_model
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Activations of one stepped position.
#[derive(Debug, Clone)]
pub(crate) struct LayerTrace {
    pub x_pre_attn: Vec<f64>,
    pub xn_a: Vec<f64>,
    pub inv_rms_a: f64,
    pub q: Vec<f64>,
    /// Attention weights per head over positions `0..=pos`.
    pub aw: Vec<Vec<f64>>,
    pub ho: Vec<f64>,
    pub x_post_attn: Vec<f64>,
    pub xn_m: Vec<f64>,
    pub inv_rms_m: f64,
    pub h1: Vec<f64>,
    pub act: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct PosTrace {
    pub token: TokenId,
    pub pos: usize,
    pub layers: Vec<LayerTrace>,
    pub x_final: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Recorded activations of a rollout, consumed by the backward pass.
#[derive(Debug, Clone, Default)]
pub struct RolloutTape {
    pub(crate) positions: Vec<PosTrace>,
}

impl RolloutTape {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Logits row produced after feeding token `t`.
    pub fn logits(&self, t: usize) -> &[f64] {
        &self.positions[t].logits
    }

    pub fn logits_rows(&self) -> Vec<Vec<f64>> {
        self.positions.iter().map(|p| p.logits.clone()).collect()
    }
}
