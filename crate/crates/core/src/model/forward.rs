//! Forward pass. Pre-norm decoder blocks with causal multi-head attention
//! and a GELU feed-forward; every intermediate needed by the backward pass
//! is kept in [`ForwardCache`].

use serde::{Deserialize, Serialize};

use super::params::{Linear, ModelParams};
use super::tensor::{gemm_into, matmul_bt, Tensor, View};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, FRAME};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Structured position of one token: index inside its span (input, target,
/// separator, literal text) and the example block it belongs to, counted
/// backwards from the query block (0).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Position {
    pub span: u16,
    pub block: u16,
}

/// Everything the model consumes for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInput {
    pub tokens: Vec<TokenId>,
    /// One row per [`FRAME`] token, in sequence order.
    pub frames: Tensor,
    pub positions: Vec<Position>,
}

impl ModelInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        let cfg = &params.config;
        if self.tokens.len() > cfg.max_seq_len {
            return Err(Error::SequenceTooLong { len: self.tokens.len(), max: cfg.max_seq_len });
        }
        if self.positions.len() != self.tokens.len() {
            return Err(Error::DimensionMismatch { expected: self.tokens.len(), got: self.positions.len() });
        }
        let n_frames = self.tokens.iter().filter(|&&t| t == FRAME).count();
        if n_frames != self.frames.rows {
            return Err(Error::DimensionMismatch { expected: n_frames, got: self.frames.rows });
        }
        if n_frames > 0 && self.frames.cols != cfg.feature_dim {
            return Err(Error::DimensionMismatch { expected: cfg.feature_dim, got: self.frames.cols });
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
            return Err(Error::Config(format!("token id {t} outside vocabulary")));
        }
        Ok(())
    }
}

pub(crate) struct LnCache {
    pub xhat: Tensor,
    pub rstd: Vec<f64>,
}

pub(crate) struct LayerCache {
    pub ln1: LnCache,
    pub a: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub u_q: Option<Tensor>,
    pub u_k: Option<Tensor>,
    pub u_v: Option<Tensor>,
    /// `n_heads` blocks of `T × T` attention probabilities.
    pub probs: Vec<Tensor>,
    pub att: Tensor,
    pub u_o: Option<Tensor>,
    pub ln2: LnCache,
    pub b: Tensor,
    pub h: Tensor,
    pub u_up: Option<Tensor>,
    pub g: Tensor,
    pub u_down: Option<Tensor>,
}

pub(crate) struct ForwardCache {
    pub layers: Vec<LayerCache>,
    pub lnf: LnCache,
    pub final_hidden: Tensor,
    /// Sequence index of each frame row.
    pub frame_positions: Vec<usize>,
}

pub(crate) fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> (Tensor, LnCache) {
    let d = x.cols;
    let mut y = Tensor::zeros(x.rows, d);
    let mut xhat = Tensor::zeros(x.rows, d);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for j in 0..d {
            xh[j] = (row[j] - mean) * rs;
        }
        let yr = &mut y.data[r * d..(r + 1) * d];
        for j in 0..d {
            yr[j] = xh[j] * gain.data[j] + bias.data[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax, numerically stabilized.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

fn embed(params: &ModelParams, input: &ModelInput) -> (Tensor, Vec<usize>) {
    let cfg = &params.config;
    let d = cfg.d_model;
    let t_len = input.tokens.len();
    let mut x = Tensor::zeros(t_len, d);
    let frame_positions: Vec<usize> =
        input.tokens.iter().enumerate().filter(|(_, &t)| t == FRAME).map(|(i, _)| i).collect();
    let projected = if frame_positions.is_empty() {
        Tensor::zeros(0, d)
    } else {
        let mut p = matmul_bt(&input.frames, &params.proj_weight);
        for r in 0..p.rows {
            for (v, b) in p.row_mut(r).iter_mut().zip(&params.proj_bias.data) {
                *v += b;
            }
        }
        p
    };
    let mut frame_idx = 0;
    for (t, &tok) in input.tokens.iter().enumerate() {
        let pos = input.positions[t];
        let span = (pos.span as usize).min(cfg.max_span - 1);
        let block = (pos.block as usize).min(cfg.max_blocks - 1);
        let src = if tok == FRAME {
            frame_idx += 1;
            projected.row(frame_idx - 1)
        } else {
            params.tok_emb.row(tok as usize)
        };
        let row = x.row_mut(t);
        for j in 0..d {
            row[j] = src[j] + params.pos_emb.data[t * d + j] + params.span_emb.data[span * d + j]
                + params.block_emb.data[block * d + j];
        }
    }
    (x, frame_positions)
}

/// Causal multi-head attention; returns the concatenated head outputs and
/// the per-head probability matrices.
fn attention(q: &Tensor, k: &Tensor, v: &Tensor, n_heads: usize) -> (Tensor, Vec<Tensor>) {
    let (t_len, d) = q.shape();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Tensor::zeros(t_len, d);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let mut s = Tensor::zeros(t_len, t_len);
        gemm_into(scale, View::cols_of(q, h * hd, hd), View::cols_of(k, h * hd, hd).t(), 0.0, &mut s.data, t_len);
        for r in 0..t_len {
            let row = s.row_mut(r);
            let m = row[..=r].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row[..=r].iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row[..=r].iter_mut() {
                *v /= z;
            }
            for v in row[r + 1..].iter_mut() {
                *v = 0.0;
            }
        }
        gemm_into(1.0, View::of(&s), View::cols_of(v, h * hd, hd), 0.0, &mut out.data[h * hd..], d);
        probs.push(s);
    }
    (out, probs)
}

fn linear(lin: &Linear, x: &Tensor) -> (Tensor, Option<Tensor>) {
    lin.forward(x)
}

fn add_in_place(x: &mut Tensor, y: &Tensor) {
    x.add_assign(y);
}

/// Runs every decoder block; returns the final hidden states (after the
/// final layer norm) and the cache.
pub(crate) fn forward_cached(params: &ModelParams, input: &ModelInput) -> Result<ForwardCache> {
    input.validate(params)?;
    let (mut x, frame_positions) = embed(params, input);
    let mut layers = Vec::with_capacity(params.layers.len());
    for (li, lp) in params.layers.iter().enumerate() {
        let (a, ln1) = layer_norm(&x, &lp.ln1_gain, &lp.ln1_bias);
        let (q, u_q) = linear(&lp.q, &a);
        let (k, u_k) = linear(&lp.k, &a);
        let (v, u_v) = linear(&lp.v, &a);
        let (att, probs) = attention(&q, &k, &v, params.config.n_heads);
        let (o, u_o) = linear(&lp.o, &att);
        add_in_place(&mut x, &o);
        let (b, ln2) = layer_norm(&x, &lp.ln2_gain, &lp.ln2_bias);
        let (h, u_up) = linear(&lp.up, &b);
        let g = Tensor::from_vec(h.rows, h.cols, h.data.iter().map(|&z| gelu(z)).collect());
        let (m, u_down) = linear(&lp.down, &g);
        add_in_place(&mut x, &m);
        if !x.all_finite() {
            return Err(Error::NonFinite { what: "activation", layer: li });
        }
        layers.push(LayerCache { ln1, a, q, k, v, u_q, u_k, u_v, probs, att, u_o, ln2, b, h, u_up, g, u_down });
    }
    let (final_hidden, lnf) = layer_norm(&x, &params.lnf_gain, &params.lnf_bias);
    Ok(ForwardCache { layers, lnf, final_hidden, frame_positions })
}

/// Full `len × vocab` logits.
pub fn forward(params: &ModelParams, input: &ModelInput) -> Result<Tensor> {
    let cache = forward_cached(params, input)?;
    let logits = matmul_bt(&cache.final_hidden, &params.head);
    if !logits.all_finite() {
        return Err(Error::NonFinite { what: "logits", layer: params.layers.len() });
    }
    Ok(logits)
}

/// Logits of the last position only.
pub fn forward_last(params: &ModelParams, input: &ModelInput) -> Result<Vec<f64>> {
    let cache = forward_cached(params, input)?;
    let last = cache.final_hidden.rows - 1;
    let h = Tensor::from_vec(1, params.config.d_model, cache.final_hidden.row(last).to_vec());
    let logits = matmul_bt(&h, &params.head);
    if !logits.all_finite() {
        return Err(Error::NonFinite { what: "logits", layer: params.layers.len() });
    }
    Ok(logits.data)
}

/// Keys and values of every layer for the tokens decoded so far.
pub(crate) struct KvCache {
    k: Vec<Tensor>,
    v: Vec<Tensor>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }
}

fn last_logits(params: &ModelParams, hidden: &[f64]) -> Result<Vec<f64>> {
    let h = Tensor::from_vec(1, params.config.d_model, hidden.to_vec());
    let logits = matmul_bt(&h, &params.head);
    if !logits.all_finite() {
        return Err(Error::NonFinite { what: "logits", layer: params.layers.len() });
    }
    Ok(logits.data)
}

/// Full pass over `input`, keeping keys and values for incremental decoding.
pub(crate) fn prefill(params: &ModelParams, input: &ModelInput) -> Result<(KvCache, Vec<f64>)> {
    let cache = forward_cached(params, input)?;
    let last = cache.final_hidden.rows - 1;
    let logits = last_logits(params, cache.final_hidden.row(last))?;
    let len = cache.final_hidden.rows;
    let (k, v) = cache.layers.into_iter().map(|l| (l.k, l.v)).unzip();
    Ok((KvCache { k, v, len }, logits))
}

/// Appends one (non-frame) token and returns the logits at its position.
pub(crate) fn decode_step(params: &ModelParams, kv: &mut KvCache, tok: TokenId, pos: Position) -> Result<Vec<f64>> {
    let cfg = &params.config;
    let (d, t) = (cfg.d_model, kv.len);
    if t + 1 > cfg.max_seq_len {
        return Err(Error::SequenceTooLong { len: t + 1, max: cfg.max_seq_len });
    }
    let span = (pos.span as usize).min(cfg.max_span - 1);
    let block = (pos.block as usize).min(cfg.max_blocks - 1);
    let mut x = Tensor::zeros(1, d);
    for j in 0..d {
        x.data[j] = params.tok_emb.row(tok as usize)[j] + params.pos_emb.data[t * d + j] + params.span_emb.data[span * d + j]
            + params.block_emb.data[block * d + j];
    }
    let n_heads = cfg.n_heads;
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    for (li, lp) in params.layers.iter().enumerate() {
        let (a, _) = layer_norm(&x, &lp.ln1_gain, &lp.ln1_bias);
        let (q, _) = linear(&lp.q, &a);
        let (k, _) = linear(&lp.k, &a);
        let (v, _) = linear(&lp.v, &a);
        let (ks, vs) = (&mut kv.k[li], &mut kv.v[li]);
        ks.data.extend_from_slice(&k.data);
        ks.rows += 1;
        vs.data.extend_from_slice(&v.data);
        vs.rows += 1;
        let mut att = Tensor::zeros(1, d);
        let mut s = vec![0.0; t + 1];
        for h in 0..n_heads {
            let qh = &q.data[h * hd..(h + 1) * hd];
            for (j, sj) in s.iter_mut().enumerate() {
                let kj = &ks.data[j * d + h * hd..j * d + (h + 1) * hd];
                *sj = scale * qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
            }
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for sj in s.iter_mut() {
                *sj = (*sj - m).exp();
                z += *sj;
            }
            let out = &mut att.data[h * hd..(h + 1) * hd];
            for (j, sj) in s.iter().enumerate() {
                let p = sj / z;
                for (o, vv) in out.iter_mut().zip(&vs.data[j * d + h * hd..j * d + (h + 1) * hd]) {
                    *o += p * vv;
                }
            }
        }
        let (o, _) = linear(&lp.o, &att);
        add_in_place(&mut x, &o);
        let (b, _) = layer_norm(&x, &lp.ln2_gain, &lp.ln2_bias);
        let (h, _) = linear(&lp.up, &b);
        let g = Tensor::from_vec(1, h.cols, h.data.iter().map(|&z| gelu(z)).collect());
        let (m, _) = linear(&lp.down, &g);
        add_in_place(&mut x, &m);
        if !x.all_finite() {
            return Err(Error::NonFinite { what: "activation", layer: li });
        }
    }
    kv.len += 1;
    let (hidden, _) = layer_norm(&x, &params.lnf_gain, &params.lnf_bias);
    last_logits(params, &hidden.data)
}
