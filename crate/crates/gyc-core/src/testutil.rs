//! Shared fixtures and independent oracles for unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math::{dot, softmax};
use crate::model::{LmParams, ModelConfig};
use crate::perturb::Perturbation;
use crate::vocab::TokenId;

/// Small model with every matrix randomized (including the output
/// projections, so all gradient paths are live).
pub(crate) fn random_params(seed: u64, vocab_size: usize) -> LmParams {
    let config = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        head_dim: 8,
        d_ff: 32,
        vocab_size,
        max_seq_len: 12,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = LmParams::init(config, seed).unwrap();
    for m in params.mats_mut() {
        for v in &mut m.data {
            *v = crate::math::gauss(&mut rng) * 0.08;
        }
    }
    params
}

pub(crate) fn random_delta(
    params: &LmParams,
    prefix_len: usize,
    scale: f64,
    seed: u64,
) -> Perturbation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut delta =
        Perturbation::zeros(params.config.n_layers, prefix_len, params.config.d_model);
    delta.for_each_mut(|v| *v = crate::math::gauss(&mut rng) * scale);
    delta
}

pub(crate) fn random_tokens(rng: &mut ChaCha8Rng, vocab_size: usize, len: usize) -> Vec<TokenId> {
    (0..len).map(|_| rng.random_range(0..vocab_size)).collect()
}

/// Whole-sequence forward pass without any key-value cache: materializes all
/// activations per position and attends over the full causal prefix. Used as
/// the cache-consistency oracle against incremental stepping.
pub(crate) fn full_forward_logits(params: &LmParams, tokens: &[TokenId]) -> Vec<Vec<f64>> {
    let cfg = &params.config;
    let (nh, dh) = (cfg.n_heads, cfg.head_dim);
    let scale = (dh as f64).sqrt();
    let n = tokens.len();
    let mut xs: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(pos, &tok)| {
            params
                .wte
                .row(tok)
                .iter()
                .zip(params.wpe.row(pos))
                .map(|(a, b)| a + b)
                .collect()
        })
        .collect();

    for lp in &params.layers {
        let normed: Vec<Vec<f64>> = xs.iter().map(|x| rmsnorm_ref(x)).collect();
        let qs: Vec<Vec<f64>> = normed.iter().map(|x| lp.wq.matvec(x)).collect();
        let ks: Vec<Vec<f64>> = normed.iter().map(|x| lp.wk.matvec(x)).collect();
        let vs: Vec<Vec<f64>> = normed.iter().map(|x| lp.wv.matvec(x)).collect();
        let mut after_attn = Vec::with_capacity(n);
        for t in 0..n {
            let mut ho = vec![0.0; cfg.d_model];
            for h in 0..nh {
                let hs = h * dh;
                let logits: Vec<f64> = (0..=t)
                    .map(|j| dot(&qs[t][hs..hs + dh], &ks[j][hs..hs + dh]) / scale)
                    .collect();
                let aw = softmax(&logits);
                for i in 0..dh {
                    ho[hs + i] = (0..=t).map(|j| aw[j] * vs[j][hs + i]).sum();
                }
            }
            let attn = lp.wo.matvec(&ho);
            after_attn.push(
                xs[t].iter().zip(&attn).map(|(a, b)| a + b).collect::<Vec<f64>>(),
            );
        }
        xs = after_attn
            .into_iter()
            .map(|x| {
                let xn = rmsnorm_ref(&x);
                let h1 = lp.fc1.matvec(&xn);
                let act: Vec<f64> =
                    h1.iter().map(|&v| v / (1.0 + (-v).exp())).collect();
                let m = lp.fc2.matvec(&act);
                x.iter().zip(&m).map(|(a, b)| a + b).collect()
            })
            .collect();
    }
    xs.iter().map(|x| params.wte.matvec(x)).collect()
}

fn rmsnorm_ref(x: &[f64]) -> Vec<f64> {
    let ms = dot(x, x) / x.len() as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter().map(|v| v * inv).collect()
}

/// Central finite difference of `f` along one perturbation coordinate.
pub(crate) fn fd_coordinate(
    f: &dyn Fn(&Perturbation) -> f64,
    delta: &Perturbation,
    idx: usize,
    h: f64,
) -> f64 {
    let mut plus = delta.clone();
    *plus.coordinate_mut(idx) += h;
    let mut minus = delta.clone();
    *minus.coordinate_mut(idx) -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Relative error with a floor for near-zero pairs.
pub(crate) fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-7);
    (a - b).abs() / denom
}
