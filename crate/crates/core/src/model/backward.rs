//! Masked next-token loss and exact reverse-mode gradients.

use super::config::TrainableScope;
use super::forward::{forward_cached, gelu_grad, ForwardCache, LnCache, ModelInput};
use super::params::{Linear, ModelParams};
use super::tensor::{add_matmul_at, gemm_into, matmul, matmul_bt, Tensor, View};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, FRAME};

fn check_mask(tokens: &[TokenId], mask: &[bool]) -> Result<usize> {
    if mask.len() != tokens.len() {
        return Err(Error::DimensionMismatch { expected: tokens.len(), got: mask.len() });
    }
    if mask.first().copied().unwrap_or(false) {
        return Err(Error::Config("position 0 has no preceding context and cannot be supervised".into()));
    }
    let m = mask.iter().filter(|&&b| b).count();
    if m == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(m)
}

/// Negative log-likelihood of every supervised token, in sequence order.
/// Token `t` is predicted by logits row `t - 1`.
pub fn token_nll(logits: &Tensor, tokens: &[TokenId], mask: &[bool]) -> Result<Vec<f64>> {
    check_mask(tokens, mask)?;
    if logits.rows != tokens.len() {
        return Err(Error::DimensionMismatch { expected: tokens.len(), got: logits.rows });
    }
    let mut out = Vec::new();
    for t in 1..tokens.len() {
        if !mask[t] {
            continue;
        }
        let row = logits.row(t - 1);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        out.push(lse - row[tokens[t] as usize]);
    }
    Ok(out)
}

/// Mean cross-entropy over the masked positions.
pub fn loss(logits: &Tensor, tokens: &[TokenId], mask: &[bool]) -> Result<f64> {
    let nll = token_nll(logits, tokens, mask)?;
    Ok(nll.iter().sum::<f64>() / nll.len() as f64)
}

fn linear_backward(lin: &Linear, x: &Tensor, u: Option<&Tensor>, dy: &Tensor, grad: &mut Linear) -> Tensor {
    let mut dx = matmul(dy, &lin.weight);
    if !grad.weight.is_empty() {
        add_matmul_at(&mut grad.weight, 1.0, dy, x);
    }
    if let (Some(l), Some(u)) = (&lin.lora, u) {
        let dyb = matmul(dy, &l.b);
        let g = grad.lora.as_mut().expect("gradient buffer mirrors adapters");
        if !g.b.is_empty() {
            add_matmul_at(&mut g.b, l.scale, dy, u);
        }
        if !g.a.is_empty() {
            add_matmul_at(&mut g.a, l.scale, &dyb, x);
        }
        let back = matmul(&dyb, &l.a);
        for (d, b) in dx.data.iter_mut().zip(&back.data) {
            *d += l.scale * b;
        }
    }
    dx
}

fn layer_norm_backward(dy: &Tensor, cache: &LnCache, gain: &Tensor, dgain: &mut Tensor, dbias: &mut Tensor) -> Tensor {
    let (rows, d) = dy.shape();
    let mut dx = Tensor::zeros(rows, d);
    let track = !dgain.is_empty();
    for r in 0..rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for j in 0..d {
            let dxh = dyr[j] * gain.data[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        let rs = cache.rstd[r];
        let out = dx.row_mut(r);
        for j in 0..d {
            let dxh = dyr[j] * gain.data[j];
            out[j] = rs * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
        }
        if track {
            for j in 0..d {
                dgain.data[j] += dyr[j] * xh[j];
                dbias.data[j] += dyr[j];
            }
        }
    }
    dx
}

fn attention_backward(datt: &Tensor, q: &Tensor, k: &Tensor, v: &Tensor, probs: &[Tensor]) -> (Tensor, Tensor, Tensor) {
    let (t_len, d) = q.shape();
    let n_heads = probs.len();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = Tensor::zeros(t_len, d);
    let mut dk = Tensor::zeros(t_len, d);
    let mut dv = Tensor::zeros(t_len, d);
    for (h, p) in probs.iter().enumerate() {
        let mut dp = Tensor::zeros(t_len, t_len);
        gemm_into(1.0, View::cols_of(datt, h * hd, hd), View::cols_of(v, h * hd, hd).t(), 0.0, &mut dp.data, t_len);
        gemm_into(1.0, View::of(p).t(), View::cols_of(datt, h * hd, hd), 0.0, &mut dv.data[h * hd..], d);
        // dS = P ⊙ (dP − rowsum(P ⊙ dP))
        for r in 0..t_len {
            let pr = p.row(r);
            let dpr = &mut dp.data[r * t_len..(r + 1) * t_len];
            let dot: f64 = (0..=r).map(|c| pr[c] * dpr[c]).sum();
            for c in 0..=r {
                dpr[c] = pr[c] * (dpr[c] - dot);
            }
            for c in r + 1..t_len {
                dpr[c] = 0.0;
            }
        }
        gemm_into(scale, View::of(&dp), View::cols_of(k, h * hd, hd), 0.0, &mut dq.data[h * hd..], d);
        gemm_into(scale, View::of(&dp).t(), View::cols_of(q, h * hd, hd), 0.0, &mut dk.data[h * hd..], d);
    }
    (dq, dk, dv)
}

/// Gradient of the mean masked loss. The returned structure mirrors
/// `params`; tensors outside `scope` are empty.
pub struct LossGrad {
    pub loss: f64,
    pub grads: ModelParams,
}

pub fn loss_and_grad(params: &ModelParams, input: &ModelInput, mask: &[bool], scope: TrainableScope) -> Result<LossGrad> {
    loss_and_grad_with_labels(params, input, &input.tokens, mask, scope)
}

/// [`loss_and_grad`] with the supervision targets given separately from the
/// input tokens: position `t` is scored against `labels[t]` when
/// `mask[t]`. Labels at unmasked positions are never read.
pub fn loss_and_grad_with_labels(
    params: &ModelParams,
    input: &ModelInput,
    labels: &[TokenId],
    mask: &[bool],
    scope: TrainableScope,
) -> Result<LossGrad> {
    if labels.len() != input.tokens.len() {
        return Err(Error::DimensionMismatch { expected: input.tokens.len(), got: labels.len() });
    }
    let m = check_mask(labels, mask)?;
    let cache = forward_cached(params, input)?;
    let logits = matmul_bt(&cache.final_hidden, &params.head);
    if !logits.all_finite() {
        return Err(Error::NonFinite { what: "logits", layer: params.layers.len() });
    }
    let loss = loss(&logits, labels, mask)?;

    let mut dlogits = Tensor::zeros(logits.rows, logits.cols);
    let inv_m = 1.0 / m as f64;
    for t in 1..input.tokens.len() {
        if !mask[t] {
            continue;
        }
        let row = logits.row(t - 1);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        let out = dlogits.row_mut(t - 1);
        for (o, v) in out.iter_mut().zip(row) {
            *o = (v - mx).exp() / z * inv_m;
        }
        out[labels[t] as usize] -= inv_m;
    }

    let mut grads = params.grad_buffer(scope);
    backward_from_logits(params, input, &cache, &dlogits, &mut grads)?;
    Ok(LossGrad { loss, grads })
}

pub(crate) fn backward_from_logits(
    params: &ModelParams,
    input: &ModelInput,
    cache: &ForwardCache,
    dlogits: &Tensor,
    grads: &mut ModelParams,
) -> Result<()> {
    if !grads.head.is_empty() {
        add_matmul_at(&mut grads.head, 1.0, dlogits, &cache.final_hidden);
    }
    let dh = matmul(dlogits, &params.head);
    let mut dx = layer_norm_backward(&dh, &cache.lnf, &params.lnf_gain, &mut grads.lnf_gain, &mut grads.lnf_bias);

    for (li, (lp, lc)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        let gl = &mut grads.layers[li];
        // feed-forward branch
        let dg = linear_backward(&lp.down, &lc.g, lc.u_down.as_ref(), &dx, &mut gl.down);
        let mut dhid = dg;
        for (d, &h) in dhid.data.iter_mut().zip(&lc.h.data) {
            *d *= gelu_grad(h);
        }
        let db = linear_backward(&lp.up, &lc.b, lc.u_up.as_ref(), &dhid, &mut gl.up);
        let dln2 = layer_norm_backward(&db, &lc.ln2, &lp.ln2_gain, &mut gl.ln2_gain, &mut gl.ln2_bias);
        dx.add_assign(&dln2);

        // attention branch
        let datt = linear_backward(&lp.o, &lc.att, lc.u_o.as_ref(), &dx, &mut gl.o);
        let (dq, dk, dv) = attention_backward(&datt, &lc.q, &lc.k, &lc.v, &lc.probs);
        let mut da = linear_backward(&lp.q, &lc.a, lc.u_q.as_ref(), &dq, &mut gl.q);
        da.add_assign(&linear_backward(&lp.k, &lc.a, lc.u_k.as_ref(), &dk, &mut gl.k));
        da.add_assign(&linear_backward(&lp.v, &lc.a, lc.u_v.as_ref(), &dv, &mut gl.v));
        let dln1 = layer_norm_backward(&da, &lc.ln1, &lp.ln1_gain, &mut gl.ln1_gain, &mut gl.ln1_bias);
        dx.add_assign(&dln1);

        if !dx.all_finite() {
            return Err(Error::NonFinite { what: "gradient", layer: li });
        }
    }

    let cfg = &params.config;
    let d = cfg.d_model;
    if !grads.tok_emb.is_empty() {
        for (t, &tok) in input.tokens.iter().enumerate() {
            if tok != FRAME {
                let g = &mut grads.tok_emb.data[tok as usize * d..(tok as usize + 1) * d];
                for (gi, xi) in g.iter_mut().zip(dx.row(t)) {
                    *gi += xi;
                }
            }
        }
    }
    if !grads.pos_emb.is_empty() {
        for t in 0..input.tokens.len() {
            let p = input.positions[t];
            let span = (p.span as usize).min(cfg.max_span - 1);
            let block = (p.block as usize).min(cfg.max_blocks - 1);
            let row = dx.row(t);
            for j in 0..d {
                grads.pos_emb.data[t * d + j] += row[j];
                grads.span_emb.data[span * d + j] += row[j];
                grads.block_emb.data[block * d + j] += row[j];
            }
        }
    }
    if !grads.proj_weight.is_empty() && !cache.frame_positions.is_empty() {
        let mut dframes = Tensor::zeros(cache.frame_positions.len(), d);
        for (i, &t) in cache.frame_positions.iter().enumerate() {
            dframes.row_mut(i).copy_from_slice(dx.row(t));
            for (gb, v) in grads.proj_bias.data.iter_mut().zip(dx.row(t)) {
                *gb += v;
            }
        }
        add_matmul_at(&mut grads.proj_weight, 1.0, &dframes, &input.frames);
    }
    Ok(())
}

/// Global L2 norm over every non-empty gradient tensor.
pub fn grad_norm(grads: &ModelParams) -> f64 {
    grads.tensors().iter().map(|(_, t)| t.sum_sq()).sum::<f64>().sqrt()
}
