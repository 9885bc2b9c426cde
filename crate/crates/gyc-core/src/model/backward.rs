//! Reverse-mode pass over a recorded rollout.
//!
//! Cross-position credit flows exclusively through the key-value history:
//! every attention read deposits gradient into the effective K/V entries it
//! consumed, and those accumulators are complete for position `j` once all
//! positions `>= j` have been processed in reverse. The effective entry is
//! `stored + delta`, so the accumulated gradient serves both the perturbation
//! (directly) and the stored entry (projected back through the K/V maps into
//! earlier activations).

use crate::math::axpy;
use crate::perturb::Perturbation;

use super::{rmsnorm_inv_backward, HistoryMatrix, LmParams, RolloutTape};

impl LmParams {
    /// Accumulates gradients of a scalar loss, given its per-row logits
    /// gradients, into `d_params` and/or `d_delta`.
    ///
    /// `d_logits[t]` is the gradient w.r.t. the logits row produced after
    /// feeding token `t`; an empty row means no direct loss at that step.
    /// `delta` must be the perturbation the rollout was recorded with.
    pub fn backward_rollout(
        &self,
        history: &HistoryMatrix,
        tape: &RolloutTape,
        delta: Option<&Perturbation>,
        d_logits: &[Vec<f64>],
        mut d_params: Option<&mut LmParams>,
        mut d_delta: Option<&mut Perturbation>,
    ) {
        let n = tape.positions.len();
        assert_eq!(d_logits.len(), n, "one logits-gradient row per stepped position");
        assert_eq!(history.len(), n, "history and tape out of sync");
        let cfg = &self.config;
        let dmod = cfg.d_model;
        let (nh, dh) = (cfg.n_heads, cfg.head_dim);
        let scale = (dh as f64).sqrt();

        // Accumulated gradient w.r.t. the effective K/V of every position.
        let mut dk_acc: Vec<Vec<Vec<f64>>> =
            vec![vec![vec![0.0; dmod]; n]; cfg.n_layers];
        let mut dv_acc: Vec<Vec<Vec<f64>>> =
            vec![vec![vec![0.0; dmod]; n]; cfg.n_layers];

        for pos in (0..n).rev() {
            let tr = &tape.positions[pos];
            let mut dx = vec![0.0; dmod];
            let dl = &d_logits[pos];
            if !dl.is_empty() {
                debug_assert_eq!(dl.len(), cfg.vocab_size);
                self.wte.matvec_t_acc(dl, &mut dx);
                if let Some(dp) = d_params.as_deref_mut() {
                    dp.wte.outer_acc(dl, &tr.x_final);
                }
            }

            for l in (0..cfg.n_layers).rev() {
                let lt = &tr.layers[l];
                let lp = &self.layers[l];

                // MLP block: x_out = x_post_attn + fc2(silu(fc1(norm(x_post_attn))))
                let mut d_act = vec![0.0; cfg.d_ff];
                lp.fc2.matvec_t_acc(&dx, &mut d_act);
                let d_h1: Vec<f64> = d_act
                    .iter()
                    .zip(&lt.h1)
                    .map(|(da, &h)| da * super::silu_deriv(h))
                    .collect();
                let mut d_xn_m = vec![0.0; dmod];
                lp.fc1.matvec_t_acc(&d_h1, &mut d_xn_m);
                if let Some(dp) = d_params.as_deref_mut() {
                    dp.layers[l].fc2.outer_acc(&dx, &lt.act);
                    dp.layers[l].fc1.outer_acc(&d_h1, &lt.xn_m);
                }
                let d_norm_m = rmsnorm_inv_backward(&d_xn_m, &lt.x_post_attn, lt.inv_rms_m);
                let mut d_x_pa = dx;
                for (o, g) in d_x_pa.iter_mut().zip(&d_norm_m) {
                    *o += g;
                }

                // Attention block: x_post_attn = x_pre_attn + wo·ho
                let mut d_ho = vec![0.0; dmod];
                lp.wo.matvec_t_acc(&d_x_pa, &mut d_ho);
                if let Some(dp) = d_params.as_deref_mut() {
                    dp.layers[l].wo.outer_acc(&d_x_pa, &lt.ho);
                }

                let t_len = pos + 1;
                let keys = &history.layers[l].keys;
                let values = &history.layers[l].values;
                let mut d_q = vec![0.0; dmod];
                for h in 0..nh {
                    let hs = h * dh;
                    let aw = &lt.aw[h];
                    let d_ho_h = &d_ho[hs..hs + dh];
                    let qh = &lt.q[hs..hs + dh];

                    // Into values, and raw gradient on the attention weights.
                    let mut d_aw = vec![0.0; t_len];
                    for j in 0..t_len {
                        axpy(aw[j], d_ho_h, &mut dv_acc[l][j][hs..hs + dh]);
                        let mut s = 0.0;
                        for i in 0..dh {
                            let mut v = values[j][hs + i];
                            if let Some(dv) = delta.and_then(|d| d.delta_v(l, j)) {
                                v += dv[hs + i];
                            }
                            s += d_ho_h[i] * v;
                        }
                        d_aw[j] = s;
                    }
                    // Softmax backward on the attention logits.
                    let dot_aw: f64 = aw.iter().zip(&d_aw).map(|(a, b)| a * b).sum();
                    for j in 0..t_len {
                        let d_alog = aw[j] * (d_aw[j] - dot_aw);
                        if d_alog == 0.0 {
                            continue;
                        }
                        let g = d_alog / scale;
                        for i in 0..dh {
                            let mut k = keys[j][hs + i];
                            if let Some(dk) = delta.and_then(|d| d.delta_k(l, j)) {
                                k += dk[hs + i];
                            }
                            d_q[hs + i] += g * k;
                            dk_acc[l][j][hs + i] += g * qh[i];
                        }
                    }
                }

                // This position's K/V accumulators are complete now.
                let dk_cur = std::mem::take(&mut dk_acc[l][pos]);
                let dv_cur = std::mem::take(&mut dv_acc[l][pos]);
                if let Some(dd) = d_delta.as_deref_mut() {
                    dd.accumulate(l, pos, &dk_cur, &dv_cur);
                }
                let mut d_xn_a = vec![0.0; dmod];
                lp.wq.matvec_t_acc(&d_q, &mut d_xn_a);
                lp.wk.matvec_t_acc(&dk_cur, &mut d_xn_a);
                lp.wv.matvec_t_acc(&dv_cur, &mut d_xn_a);
                if let Some(dp) = d_params.as_deref_mut() {
                    dp.layers[l].wq.outer_acc(&d_q, &lt.xn_a);
                    dp.layers[l].wk.outer_acc(&dk_cur, &lt.xn_a);
                    dp.layers[l].wv.outer_acc(&dv_cur, &lt.xn_a);
                }
                let d_norm_a = rmsnorm_inv_backward(&d_xn_a, &lt.x_pre_attn, lt.inv_rms_a);
                dx = d_x_pa;
                for (o, g) in dx.iter_mut().zip(&d_norm_a) {
                    *o += g;
                }
            }

            if let Some(dp) = d_params.as_deref_mut() {
                axpy(1.0, &dx, dp.wte.row_mut(tr.token));
                axpy(1.0, &dx, dp.wpe.row_mut(tr.pos));
            }
        }
    }
}
