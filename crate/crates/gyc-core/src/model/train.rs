//! Language-model training: per-sequence Adam over teacher-forced
//! cross-entropy. Deterministic under the configured seed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{LmCheckpoint, TrainingMeta};
use crate::error::{GycError, Result};
use crate::math::{log_softmax, softmax};
use crate::vocab::{TokenSequence, Vocabulary, BOS_ID, EOS_ID};

use super::{HistoryMatrix, LmParams, ModelConfig};

/// Training hyper-parameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 30, learning_rate: 0.01, seed: 0 }
    }
}

/// Adam moments shaped like the parameter set.
pub struct AdamState {
    m: LmParams,
    v: LmParams,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(like: &LmParams) -> Self {
        AdamState {
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Loss-descent step.
    pub fn descend(&mut self, params: &mut LmParams, grads: &LmParams, lr: f64) {
        self.t += 1;
        let corr = lr * (1.0 - self.beta2.powi(self.t as i32)).sqrt()
            / (1.0 - self.beta1.powi(self.t as i32));
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let mut pm = params.mats_mut();
        let mut mm = self.m.mats_mut();
        let mut vm = self.v.mats_mut();
        let gm = grads.mats();
        for i in 0..pm.len() {
            let p = &mut pm[i].data;
            let m = &mut mm[i].data;
            let v = &mut vm[i].data;
            let g = &gm[i].data;
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                p[j] -= corr * m[j] / (v[j].sqrt() + eps);
            }
        }
    }
}

/// Trains a model on the corpus and packages it with its vocabulary and
/// training metadata. Sequences are bracketed as `BOS x .. x EOS`; each
/// corpus sentence must fit `max_seq_len - 1`.
pub fn train_lm(
    corpus: &[TokenSequence],
    vocab: &Vocabulary,
    model_config: ModelConfig,
    train_config: &TrainConfig,
) -> Result<LmCheckpoint> {
    if corpus.is_empty() {
        return Err(GycError::InvalidArgument("empty corpus".into()));
    }
    if model_config.vocab_size != vocab.size() {
        return Err(GycError::InvalidConfig(format!(
            "config vocab_size {} != vocabulary size {}",
            model_config.vocab_size,
            vocab.size()
        )));
    }
    model_config.validate()?;
    for seq in corpus {
        seq.validate(vocab.size())?;
        if seq.len() + 1 > model_config.max_seq_len {
            return Err(GycError::InvalidArgument(format!(
                "corpus sentence of length {} exceeds max context {} - 1",
                seq.len(),
                model_config.max_seq_len
            )));
        }
    }

    let mut params = LmParams::init(model_config, train_config.seed)?;
    let mut adam = AdamState::new(&params);
    let mut grads = params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..corpus.len()).collect();

    for _epoch in 0..train_config.epochs {
        order.shuffle(&mut rng);
        for &idx in &order {
            let seq = &corpus[idx];
            let mut fed = Vec::with_capacity(seq.len() + 1);
            fed.push(BOS_ID);
            fed.extend_from_slice(seq.ids());
            let mut targets = Vec::with_capacity(seq.len() + 1);
            targets.extend_from_slice(seq.ids());
            targets.push(EOS_ID);

            let (tape, history) = params.rollout(&fed, None)?;
            let norm = 1.0 / targets.len() as f64;
            let d_logits: Vec<Vec<f64>> = (0..tape.len())
                .map(|t| {
                    let mut row: Vec<f64> =
                        softmax(tape.logits(t)).iter().map(|p| p * norm).collect();
                    row[targets[t]] -= norm;
                    row
                })
                .collect();
            for g in grads.mats_mut() {
                g.fill(0.0);
            }
            params.backward_rollout(&history, &tape, None, &d_logits, Some(&mut grads), None);
            adam.descend(&mut params, &grads, train_config.learning_rate);
        }
    }

    let final_loss = mean_nll(&params, corpus)?;
    let meta = TrainingMeta {
        corpus_hash: format!("{:016x}", corpus_fingerprint(corpus)),
        seed: train_config.seed,
        epochs: train_config.epochs,
        final_loss,
    };
    Ok(LmCheckpoint { params, vocab: vocab.clone(), meta })
}

/// Mean per-token negative log-likelihood over `corpus` (EOS included).
pub fn mean_nll(params: &LmParams, corpus: &[TokenSequence]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in corpus {
        let mut fed = vec![BOS_ID];
        fed.extend_from_slice(seq.ids());
        let mut targets = seq.ids().to_vec();
        targets.push(EOS_ID);
        let mut history = HistoryMatrix::empty(params.config.n_layers);
        for (t, &tok) in fed.iter().enumerate() {
            let logits = params.step_full(tok, &mut history, None, None)?;
            total -= log_softmax(&logits)[targets[t]];
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// `exp` of the mean NLL; the held-out quality number recorded for a model.
pub fn heldout_perplexity(params: &LmParams, corpus: &[TokenSequence]) -> Result<f64> {
    Ok(mean_nll(params, corpus)?.exp())
}

/// FNV-1a over the token ids; identifies the training corpus in metadata.
fn corpus_fingerprint(corpus: &[TokenSequence]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |v: u64| {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    eat(corpus.len() as u64);
    for seq in corpus {
        eat(seq.len() as u64);
        for &id in seq.ids() {
            eat(id as u64);
        }
    }
    h
}
