//! Sampling, greedy decoding and teacher-forced sequence scoring.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GycError, Result};
use crate::math::{argmax, log_softmax, sample_categorical, softmax};
use crate::perturb::Perturbation;
use crate::vocab::{TokenId, TokenSequence, BOS_ID, EOS_ID};

use super::{HistoryMatrix, LmParams};

/// Options for [`sample_sequence`].
#[derive(Debug, Clone)]
pub struct SampleOptions {
    /// Total length cap, prompt included.
    pub max_len: usize,
    pub temperature: f64,
    pub seed: u64,
}

/// Samples a continuation of `prompt` from the categorical next-token
/// distribution at each step.
///
/// `history_override`, when given, must be the history of `prompt` minus its
/// last token (that token is stepped first); this lets callers inject a
/// doctored or perturbed cache. `delta` applies perturbed stepping on top of
/// whichever history is used. Generation stops at EOS (not included in the
/// output) or at `max_len` tokens; identical inputs and seed give identical
/// output.
pub fn sample_sequence(
    params: &LmParams,
    prompt: &TokenSequence,
    opts: &SampleOptions,
    history_override: Option<HistoryMatrix>,
    delta: Option<&Perturbation>,
) -> Result<TokenSequence> {
    if !(opts.temperature > 0.0) {
        return Err(GycError::InvalidArgument(format!(
            "temperature must be positive, got {}",
            opts.temperature
        )));
    }
    prompt.validate(params.config.vocab_size)?;
    let mut history = match history_override {
        Some(h) => {
            h.validate(&params.config)?;
            if h.len() != prompt.len() - 1 {
                return Err(GycError::ShapeMismatch(format!(
                    "history override holds {} positions, prompt requires {}",
                    h.len(),
                    prompt.len() - 1
                )));
            }
            h
        }
        None => {
            let mut h = HistoryMatrix::empty(params.config.n_layers);
            for &tok in &prompt.ids()[..prompt.len() - 1] {
                params.step_full(tok, &mut h, delta, None)?;
            }
            h
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out: Vec<TokenId> = prompt.ids().to_vec();
    let max_len = opts.max_len.min(params.config.max_seq_len);
    let mut cur = *out.last().expect("prompt non-empty");
    while out.len() < max_len {
        let logits = params.step_full(cur, &mut history, delta, None)?;
        let scaled: Vec<f64> = logits.iter().map(|v| v / opts.temperature).collect();
        let tok = sample_categorical(&softmax(&scaled), &mut rng);
        if tok == EOS_ID {
            break;
        }
        out.push(tok);
        cur = tok;
    }
    TokenSequence::new(out)
}

/// Greedy (temperature-zero limit) decode of up to `max_new` tokens after
/// `prompt`. Returns only the generated tokens; stops at EOS. Ties in the
/// logits resolve to the lowest token id.
pub fn argmax_decode(
    params: &LmParams,
    prompt: &[TokenId],
    delta: Option<&Perturbation>,
    max_new: usize,
) -> Result<Vec<TokenId>> {
    if prompt.is_empty() {
        return Err(GycError::EmptyInput);
    }
    let mut history = HistoryMatrix::empty(params.config.n_layers);
    for &tok in &prompt[..prompt.len() - 1] {
        params.step_full(tok, &mut history, delta, None)?;
    }
    let mut out = Vec::with_capacity(max_new);
    let mut cur = *prompt.last().unwrap();
    while out.len() < max_new {
        let logits = params.step_full(cur, &mut history, delta, None)?;
        let tok = argmax(&logits);
        if tok == EOS_ID {
            break;
        }
        out.push(tok);
        cur = tok;
    }
    Ok(out)
}

/// The token sequence fed to score or regenerate `x` from scratch: BOS plus
/// all but the last input token. Rollout row `t` then scores `x[t]`.
pub(crate) fn teacher_fed_tokens(x: &TokenSequence) -> Vec<TokenId> {
    let mut fed = Vec::with_capacity(x.len());
    fed.push(BOS_ID);
    fed.extend_from_slice(&x.ids()[..x.len() - 1]);
    fed
}

/// Log-probability of `x` under (optionally perturbed) stepping from BOS.
/// Returns the total and the per-token log-probabilities.
pub fn sequence_log_prob(
    params: &LmParams,
    x: &TokenSequence,
    delta: Option<&Perturbation>,
) -> Result<(f64, Vec<f64>)> {
    x.validate(params.config.vocab_size)?;
    let fed = teacher_fed_tokens(x);
    let mut history = HistoryMatrix::empty(params.config.n_layers);
    let mut per_token = Vec::with_capacity(x.len());
    for (t, &tok) in fed.iter().enumerate() {
        let logits = params.step_full(tok, &mut history, delta, None)?;
        per_token.push(log_softmax(&logits)[x.ids()[t]]);
    }
    Ok((per_token.iter().sum(), per_token))
}
