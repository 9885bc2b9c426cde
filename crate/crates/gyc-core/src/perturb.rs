//! Learnable additive perturbation of the key-value history, the proximity
//! (reconstruction) loss, and the curriculum strategies that drive a
//! perturbation toward regenerating a given input sentence.

use serde::{Deserialize, Serialize};

use crate::error::{GycError, Result};
use crate::math::log_softmax;
use crate::model::{argmax_decode, teacher_fed_tokens, HistoryMatrix, LmParams, ModelConfig};
use crate::vocab::{TokenId, TokenSequence, BOS_ID};

/// Additive delta over the first `prefix_len` history positions of every
/// layer. The same shape doubles as its own gradient and moment buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    layers: Vec<LayerDelta>,
    prefix_len: usize,
    d_model: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerDelta {
    dk: Vec<Vec<f64>>,
    dv: Vec<Vec<f64>>,
}

impl Perturbation {
    /// All-zero perturbation with explicit shape.
    pub fn zeros(n_layers: usize, prefix_len: usize, d_model: usize) -> Self {
        let layer = LayerDelta {
            dk: vec![vec![0.0; d_model]; prefix_len],
            dv: vec![vec![0.0; d_model]; prefix_len],
        };
        Perturbation { layers: vec![layer; n_layers], prefix_len, d_model }
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Key delta for `pos`, or `None` beyond the covered prefix.
    #[inline]
    pub fn delta_k(&self, layer: usize, pos: usize) -> Option<&[f64]> {
        if pos < self.prefix_len {
            Some(&self.layers[layer].dk[pos])
        } else {
            None
        }
    }

    /// Value delta for `pos`, or `None` beyond the covered prefix.
    #[inline]
    pub fn delta_v(&self, layer: usize, pos: usize) -> Option<&[f64]> {
        if pos < self.prefix_len {
            Some(&self.layers[layer].dv[pos])
        } else {
            None
        }
    }

    pub(crate) fn check_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layers.len() != cfg.n_layers || self.d_model != cfg.d_model {
            return Err(GycError::ShapeMismatch(format!(
                "perturbation shaped for {} layers x {}, model has {} x {}",
                self.layers.len(),
                self.d_model,
                cfg.n_layers,
                cfg.d_model
            )));
        }
        Ok(())
    }

    /// Accumulates gradient contributions for one covered position.
    pub(crate) fn accumulate(&mut self, layer: usize, pos: usize, dk: &[f64], dv: &[f64]) {
        if pos >= self.prefix_len {
            return;
        }
        for (o, g) in self.layers[layer].dk[pos].iter_mut().zip(dk) {
            *o += g;
        }
        for (o, g) in self.layers[layer].dv[pos].iter_mut().zip(dv) {
            *o += g;
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.for_each_mut(|v| *v *= s);
        out
    }

    pub fn l2_norm(&self) -> f64 {
        let mut acc = 0.0;
        self.for_each(|v| acc += v * v);
        acc.sqrt()
    }

    pub(crate) fn for_each(&self, mut f: impl FnMut(f64)) {
        for l in &self.layers {
            for row in l.dk.iter().chain(l.dv.iter()) {
                for &v in row {
                    f(v);
                }
            }
        }
    }

    pub(crate) fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for l in &mut self.layers {
            for row in l.dk.iter_mut().chain(l.dv.iter_mut()) {
                for v in row {
                    f(v);
                }
            }
        }
    }

    /// Pairwise visit of `(self, other)` coordinates, mutating `self`.
    pub(crate) fn zip_mut(&mut self, other: &Perturbation, mut f: impl FnMut(&mut f64, f64)) {
        assert_eq!(self.prefix_len, other.prefix_len);
        assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (ra, rb) in a.dk.iter_mut().zip(&b.dk).chain(a.dv.iter_mut().zip(&b.dv)) {
                for (x, y) in ra.iter_mut().zip(rb) {
                    f(x, *y);
                }
            }
        }
    }

    /// Flat view of all coordinates as (layer, kind, pos, dim) — used by the
    /// gradient checks to address random coordinates.
    pub fn coordinate_count(&self) -> usize {
        self.layers.len() * 2 * self.prefix_len * self.d_model
    }

    pub fn coordinate(&self, idx: usize) -> f64 {
        let (l, kind, pos, dim) = self.locate(idx);
        let layer = &self.layers[l];
        let row = if kind == 0 { &layer.dk[pos] } else { &layer.dv[pos] };
        row[dim]
    }

    pub fn coordinate_mut(&mut self, idx: usize) -> &mut f64 {
        let (l, kind, pos, dim) = self.locate(idx);
        let layer = &mut self.layers[l];
        let row = if kind == 0 { &mut layer.dk[pos] } else { &mut layer.dv[pos] };
        &mut row[dim]
    }

    fn locate(&self, idx: usize) -> (usize, usize, usize, usize) {
        let per_row = self.d_model;
        let per_kind = self.prefix_len * per_row;
        let per_layer = 2 * per_kind;
        let l = idx / per_layer;
        let rem = idx % per_layer;
        let kind = rem / per_kind;
        let rem = rem % per_kind;
        (l, kind, rem / per_row, rem % per_row)
    }
}

/// Zero perturbation matching a history's current shape.
pub fn init_perturbation(history: &HistoryMatrix) -> Result<Perturbation> {
    if history.is_empty() {
        return Err(GycError::InvalidArgument("cannot perturb an empty history".into()));
    }
    let d_model = history.layers[0].keys[0].len();
    for (i, l) in history.layers.iter().enumerate() {
        if l.keys.len() != history.len() || l.values.len() != history.len() {
            return Err(GycError::ShapeMismatch(format!("layer {i} length mismatch")));
        }
        if l.keys.iter().chain(l.values.iter()).any(|r| r.len() != d_model) {
            return Err(GycError::ShapeMismatch(format!("layer {i} row width mismatch")));
        }
    }
    Ok(Perturbation::zeros(history.n_layers(), history.len(), d_model))
}

/// Materializes `history + delta` over the covered prefix; any suffix is
/// copied unchanged. Neither input is mutated.
pub fn apply_perturbation(history: &HistoryMatrix, delta: &Perturbation) -> Result<HistoryMatrix> {
    if history.n_layers() != delta.n_layers() {
        return Err(GycError::ShapeMismatch("layer count mismatch".into()));
    }
    if history.len() < delta.prefix_len() {
        return Err(GycError::ShapeMismatch(format!(
            "history length {} shorter than perturbation prefix {}",
            history.len(),
            delta.prefix_len()
        )));
    }
    let mut out = history.clone();
    for (l, layer) in out.layers.iter_mut().enumerate() {
        for pos in 0..delta.prefix_len() {
            let dk = delta.delta_k(l, pos).unwrap();
            let dv = delta.delta_v(l, pos).unwrap();
            if layer.keys[pos].len() != dk.len() {
                return Err(GycError::ShapeMismatch(format!(
                    "row width mismatch at layer {l} position {pos}"
                )));
            }
            for (o, g) in layer.keys[pos].iter_mut().zip(dk) {
                *o += g;
            }
            for (o, g) in layer.values[pos].iter_mut().zip(dv) {
                *o += g;
            }
        }
    }
    Ok(out)
}

/// Sum of perturbed-stepping log-probabilities of the first `curriculum_len`
/// tokens of `x`.
pub fn proximity_loss(
    params: &LmParams,
    x: &TokenSequence,
    delta: &Perturbation,
    curriculum_len: usize,
) -> Result<f64> {
    let (loss, _, _) = proximity_rollout(params, x, delta, curriculum_len, false)?;
    Ok(loss)
}

/// Proximity loss together with its gradient with respect to `delta`.
pub fn proximity_loss_grad(
    params: &LmParams,
    x: &TokenSequence,
    delta: &Perturbation,
    curriculum_len: usize,
) -> Result<(f64, Perturbation)> {
    let (loss, tape, history) = proximity_rollout(params, x, delta, curriculum_len, true)?;
    let tape = tape.expect("tape requested");
    let mut d_logits = Vec::with_capacity(tape.len());
    for t in 0..tape.len() {
        if t < curriculum_len {
            let p = crate::math::softmax(tape.logits(t));
            let target = x.ids()[t];
            let mut row: Vec<f64> = p.iter().map(|v| -v).collect();
            row[target] += 1.0;
            d_logits.push(row);
        } else {
            d_logits.push(Vec::new());
        }
    }
    let mut grad = Perturbation::zeros(delta.n_layers(), delta.prefix_len(), params.config.d_model);
    params.backward_rollout(&history, &tape, Some(delta), &d_logits, None, Some(&mut grad));
    Ok((loss, grad))
}

fn proximity_rollout(
    params: &LmParams,
    x: &TokenSequence,
    delta: &Perturbation,
    curriculum_len: usize,
    trace: bool,
) -> Result<(f64, Option<crate::model::RolloutTape>, HistoryMatrix)> {
    if curriculum_len == 0 || curriculum_len > x.len() {
        return Err(GycError::InvalidArgument(format!(
            "curriculum length {curriculum_len} out of range 1..={}",
            x.len()
        )));
    }
    x.validate(params.config.vocab_size)?;
    let fed = teacher_fed_tokens(x);
    let (tape, history) = params.rollout(&fed, Some(delta))?;
    let mut loss = 0.0;
    for t in 0..curriculum_len {
        loss += log_softmax(tape.logits(t))[x.ids()[t]];
    }
    Ok((loss, if trace { Some(tape) } else { None }, history))
}

/// Reconstruction curriculum strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurriculumMode {
    /// Optimize every position at once from the first iteration.
    Naive,
    /// Advance the curriculum every `period` iterations.
    Fixed { period: usize },
    /// Advance once the previous tokens are regenerated; roll back to the
    /// longest still-matching prefix when an earlier token is lost.
    Adaptive,
}

/// Next curriculum length given the current greedy decode.
pub fn update_curriculum(
    x: &TokenSequence,
    decode: &[TokenId],
    k_current: usize,
    mode: CurriculumMode,
    iteration: usize,
) -> usize {
    let t = x.len();
    match mode {
        CurriculumMode::Naive => t,
        CurriculumMode::Fixed { period } => (1 + iteration / period.max(1)).min(t),
        CurriculumMode::Adaptive => {
            let matched = common_prefix_len(x.ids(), decode);
            if matched >= k_current {
                (k_current + 1).min(t)
            } else {
                matched + 1
            }
        }
    }
}

fn common_prefix_len(a: &[TokenId], b: &[TokenId]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// One optimization step of a reconstruction run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub phase: String,
    pub loss: f64,
    pub curriculum_len: usize,
    pub tokens_matched: usize,
    pub rolled_back: bool,
}

/// Iteration log of a reconstruction run; serializes to JSON lines.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReconstructionTrace {
    pub records: Vec<TraceRecord>,
    pub converged: bool,
    pub iterations: usize,
}

impl ReconstructionTrace {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Reconstruction hyper-parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructionConfig {
    pub mode: CurriculumMode,
    pub max_iters: usize,
    pub learning_rate: f64,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        ReconstructionConfig {
            mode: CurriculumMode::Adaptive,
            max_iters: 500,
            learning_rate: 0.05,
        }
    }
}

/// Adam ascent over perturbation coordinates.
#[derive(Debug, Clone)]
pub struct PerturbOptimizer {
    m: Perturbation,
    v: Perturbation,
    t: usize,
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl PerturbOptimizer {
    pub fn new(shape: &Perturbation, learning_rate: f64) -> Self {
        PerturbOptimizer {
            m: shape.scaled(0.0),
            v: shape.scaled(0.0),
            t: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Gradient-ascent step: `delta += lr_t * m_hat / (sqrt(v_hat) + eps)`.
    pub fn ascend(&mut self, delta: &mut Perturbation, grad: &Perturbation) {
        self.t += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        self.m.zip_mut(grad, |m, g| *m = b1 * *m + (1.0 - b1) * g);
        self.v.zip_mut(grad, |v, g| *v = b2 * *v + (1.0 - b2) * g * g);
        let corr = self.learning_rate * (1.0 - b2.powi(self.t as i32)).sqrt()
            / (1.0 - b1.powi(self.t as i32));
        let eps = self.eps;
        for ((ld, lm), lv) in delta.layers.iter_mut().zip(&self.m.layers).zip(&self.v.layers) {
            let rows = ld
                .dk
                .iter_mut()
                .zip(&lm.dk)
                .zip(&lv.dk)
                .chain(ld.dv.iter_mut().zip(&lm.dv).zip(&lv.dv));
            for ((rd, rm), rv) in rows {
                for ((d, m), v) in rd.iter_mut().zip(rm).zip(rv) {
                    *d += corr * m / (v.sqrt() + eps);
                }
            }
        }
    }
}

/// Learns a perturbation whose greedy decode regenerates `x`.
///
/// Runs gradient ascent on the proximity loss under the configured
/// curriculum until the argmax decode under the perturbed history equals
/// `x`, or `max_iters` is reached (in which case the best-so-far delta is
/// returned with `converged == false`).
pub fn reconstruct(
    params: &LmParams,
    x: &TokenSequence,
    config: &ReconstructionConfig,
) -> Result<(Perturbation, ReconstructionTrace)> {
    let t = x.len();
    if t + 1 > params.config.max_seq_len {
        return Err(GycError::InvalidArgument(format!(
            "input length {t} exceeds max context {} - 1",
            params.config.max_seq_len
        )));
    }
    x.validate(params.config.vocab_size)?;

    let fed = teacher_fed_tokens(x);
    let (_, base_history) = params.rollout(&fed, None)?;
    let mut delta = init_perturbation(&base_history)?;
    let mut opt = PerturbOptimizer::new(&delta, config.learning_rate);
    let mut trace = ReconstructionTrace::default();
    let mut k_cur = match config.mode {
        CurriculumMode::Naive => t,
        _ => 1,
    };
    let mut best: Option<(usize, Perturbation)> = None;

    for iter in 0..config.max_iters {
        let decode = argmax_decode(params, &[BOS_ID], Some(&delta), t)?;
        let matched = common_prefix_len(x.ids(), &decode);
        if best.as_ref().map_or(true, |(m, _)| matched > *m) {
            best = Some((matched, delta.clone()));
        }
        if matched == t {
            trace.converged = true;
            trace.iterations = iter;
            return Ok((delta, trace));
        }
        let k_next = update_curriculum(x, &decode, k_cur, config.mode, iter);
        let rolled_back = k_next < k_cur;
        k_cur = k_next;
        let (loss, grad) = proximity_loss_grad(params, x, &delta, k_cur)?;
        opt.ascend(&mut delta, &grad);
        trace.records.push(TraceRecord {
            iter,
            phase: "reconstruction".into(),
            loss,
            curriculum_len: k_cur,
            tokens_matched: matched,
            rolled_back,
        });
    }

    // Not converged: final decode may still have improved on the last step.
    let decode = argmax_decode(params, &[BOS_ID], Some(&delta), t)?;
    let matched = common_prefix_len(x.ids(), &decode);
    if matched == t {
        trace.converged = true;
        trace.iterations = config.max_iters;
        return Ok((delta, trace));
    }
    if best.as_ref().map_or(true, |(m, _)| matched > *m) {
        best = Some((matched, delta));
    }
    trace.converged = false;
    trace.iterations = config.max_iters;
    Ok((best.expect("at least one iteration ran").1, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sequence_log_prob, train_lm, ModelConfig, TrainConfig};
    use crate::testutil::{random_delta, random_params};
    use crate::vocab::Vocabulary;

    fn history_for(params: &LmParams, tokens: &[TokenId]) -> HistoryMatrix {
        params.rollout(tokens, None).unwrap().1
    }

    #[test]
    fn init_is_zero_and_apply_is_identity() {
        let params = random_params(1, 11);
        let h = history_for(&params, &[BOS_ID, 5, 7, 9]);
        let d = init_perturbation(&h).unwrap();
        assert_eq!(d.prefix_len(), h.len());
        assert_eq!(d.n_layers(), h.n_layers());
        assert_eq!(d.l2_norm(), 0.0);
        let applied = apply_perturbation(&h, &d).unwrap();
        assert_eq!(applied, h);

        let d2 = init_perturbation(&h).unwrap();
        assert_eq!(d, d2);
    }

    #[test]
    fn init_on_empty_history_is_an_error() {
        let h = HistoryMatrix::empty(2);
        assert!(init_perturbation(&h).is_err());
    }

    #[test]
    fn apply_negating_prefix_zeroes_it() {
        let params = random_params(2, 11);
        let h = history_for(&params, &[BOS_ID, 5, 7]);
        let mut d = init_perturbation(&h).unwrap();
        for l in 0..h.n_layers() {
            for pos in 0..h.len() {
                let dk: Vec<f64> = h.layers[l].keys[pos].iter().map(|v| -v).collect();
                let dv: Vec<f64> = h.layers[l].values[pos].iter().map(|v| -v).collect();
                d.accumulate(l, pos, &dk, &dv);
            }
        }
        let out = apply_perturbation(&h, &d).unwrap();
        for l in &out.layers {
            for row in l.keys.iter().chain(l.values.iter()) {
                assert!(row.iter().all(|&v| v.abs() < 1e-15));
            }
        }
    }

    #[test]
    fn apply_is_linear_and_does_not_mutate() {
        let params = random_params(3, 11);
        let h = history_for(&params, &[BOS_ID, 4, 6, 8]);
        let h_copy = h.clone();
        let d = random_delta(&params, 3, 0.5, 17);
        let once = apply_perturbation(&h, &d).unwrap();
        let twice = apply_perturbation(&once, &d).unwrap();
        let doubled = apply_perturbation(&h, &d.scaled(2.0)).unwrap();
        assert_eq!(h, h_copy);
        for l in 0..h.n_layers() {
            for pos in 0..h.len() {
                for i in 0..twice.layers[l].keys[pos].len() {
                    let a = twice.layers[l].keys[pos][i];
                    let b = doubled.layers[l].keys[pos][i];
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
        // Suffix beyond the prefix is untouched.
        assert_eq!(once.layers[0].keys[3], h.layers[0].keys[3]);
    }

    #[test]
    fn apply_shape_mismatch_is_an_error() {
        let params = random_params(4, 11);
        let h = history_for(&params, &[BOS_ID, 4]);
        let d = random_delta(&params, 5, 0.1, 3);
        assert!(apply_perturbation(&h, &d).is_err());
    }

    #[test]
    fn full_curriculum_recovers_sequence_log_prob() {
        let params = random_params(5, 13);
        let x = TokenSequence::new(vec![4, 9, 6, 11]).unwrap();
        let d = random_delta(&params, x.len(), 0.05, 23);
        let lp = proximity_loss(&params, &x, &d, x.len()).unwrap();
        let (expect, _) = sequence_log_prob(&params, &x, Some(&d)).unwrap();
        assert!((lp - expect).abs() < 1e-12);

        let zero = Perturbation::zeros(params.config.n_layers, x.len(), params.config.d_model);
        let lp0 = proximity_loss(&params, &x, &zero, x.len()).unwrap();
        let (unperturbed, _) = sequence_log_prob(&params, &x, None).unwrap();
        assert!((lp0 - unperturbed).abs() < 1e-12);
    }

    #[test]
    fn proximity_is_monotone_in_curriculum() {
        let params = random_params(6, 13);
        let x = TokenSequence::new(vec![7, 3, 10, 6, 12]).unwrap();
        let d = random_delta(&params, x.len(), 0.08, 31);
        let mut prev = 0.0;
        for k in 1..=x.len() {
            let lp = proximity_loss(&params, &x, &d, k).unwrap();
            assert!(lp <= prev + 1e-12, "L_p({k}) = {lp} above L_p({}) = {prev}", k - 1);
            prev = lp;
        }
    }

    #[test]
    fn curriculum_len_out_of_range_is_an_error() {
        let params = random_params(7, 13);
        let x = TokenSequence::new(vec![4, 6]).unwrap();
        let d = Perturbation::zeros(params.config.n_layers, 2, params.config.d_model);
        assert!(proximity_loss(&params, &x, &d, 0).is_err());
        assert!(proximity_loss(&params, &x, &d, 3).is_err());
    }

    #[test]
    fn adaptive_curriculum_advances_and_rolls_back() {
        let x = TokenSequence::new(vec![10, 11, 12, 13, 14]).unwrap();
        // All of the first K matched: advance by one.
        let k = update_curriculum(&x, &[10, 11, 12, 9, 9], 3, CurriculumMode::Adaptive, 0);
        assert_eq!(k, 4);
        // Token 2 (1-based) lost with K=5: roll back to 2.
        let k = update_curriculum(&x, &[10, 9, 12, 13, 14], 5, CurriculumMode::Adaptive, 0);
        assert_eq!(k, 2);
        // Full match caps at T.
        let k = update_curriculum(&x, x.ids(), 5, CurriculumMode::Adaptive, 0);
        assert_eq!(k, 5);
        // Naive always targets the full sentence.
        let k = update_curriculum(&x, &[9, 9, 9, 9, 9], 1, CurriculumMode::Naive, 0);
        assert_eq!(k, 5);
        // Fixed advances on the iteration count alone.
        let k = update_curriculum(&x, &[9; 5], 1, CurriculumMode::Fixed { period: 30 }, 65);
        assert_eq!(k, 3);
    }

    #[test]
    fn reconstructs_memorized_sentence_with_zero_delta() {
        let vocab =
            Vocabulary::from_words(["the", "soup", "was", "very", "salty"]).unwrap();
        let x = vocab.tokenize("the soup was very salty").unwrap();
        let ck = train_lm(
            std::slice::from_ref(&x),
            &vocab,
            ModelConfig::desk(vocab.size()),
            &TrainConfig { epochs: 200, learning_rate: 0.01, seed: 2 },
        )
        .unwrap();
        let (delta, trace) = reconstruct(&ck.params, &x, &ReconstructionConfig::default()).unwrap();
        assert!(trace.converged);
        assert_eq!(trace.iterations, 0, "memorized sentence needs no optimization");
        assert!(delta.l2_norm() < 1e-12);
    }

    #[test]
    fn reconstructs_held_out_sentence() {
        let vocab = Vocabulary::from_words([
            "the", "food", "pizza", "coffee", "soup", "is", "was", "great", "awful",
            "tasty", "bland",
        ])
        .unwrap();
        let texts = [
            "the food is great",
            "the food was awful",
            "the pizza is tasty",
            "the pizza was bland",
            "the coffee is great",
            "the soup was bland",
            "the coffee was awful",
            "the soup is tasty",
        ];
        let corpus: Vec<TokenSequence> =
            texts.iter().map(|t| vocab.tokenize(t).unwrap()).collect();
        let ck = train_lm(
            &corpus,
            &vocab,
            ModelConfig::desk(vocab.size()),
            &TrainConfig { epochs: 60, learning_rate: 0.01, seed: 3 },
        )
        .unwrap();

        // In-distribution but never trained on.
        let x = vocab.tokenize("the pizza was great").unwrap();
        let (delta, trace) = reconstruct(&ck.params, &x, &ReconstructionConfig::default()).unwrap();
        assert!(trace.converged, "reconstruction did not converge: {trace:?}");
        let decode = argmax_decode(&ck.params, &[BOS_ID], Some(&delta), x.len()).unwrap();
        assert_eq!(decode, x.ids());
    }

    #[test]
    fn trace_serializes_to_json_lines() {
        let trace = ReconstructionTrace {
            records: vec![
                TraceRecord {
                    iter: 0,
                    phase: "reconstruction".into(),
                    loss: -3.5,
                    curriculum_len: 1,
                    tokens_matched: 0,
                    rolled_back: false,
                },
                TraceRecord {
                    iter: 1,
                    phase: "reconstruction".into(),
                    loss: -2.0,
                    curriculum_len: 2,
                    tokens_matched: 1,
                    rolled_back: false,
                },
            ],
            converged: true,
            iterations: 2,
        };
        let jsonl = trace.to_jsonl().unwrap();
        let lines: Vec<&str> = jsonl.lines().collect();
        assert_eq!(lines.len(), 2);
        for line in lines {
            let rec: TraceRecord = serde_json::from_str(line).unwrap();
            assert_eq!(rec.phase, "reconstruction");
        }
    }

    #[test]
    fn sentence_too_long_is_an_error() {
        let params = random_params(8, 13);
        let ids = vec![5; params.config.max_seq_len];
        let x = TokenSequence::new(ids).unwrap();
        assert!(reconstruct(&params, &x, &ReconstructionConfig::default()).is_err());
    }
}
