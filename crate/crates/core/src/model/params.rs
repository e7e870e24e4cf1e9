//! Parameter storage, initialization, the frozen/trainable partition and LoRA merging.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{LoraConfig, LoraTarget, ModelConfig, TrainableScope};
use super::tensor::{add_matmul, matmul_bt, Tensor};

/// Low-rank delta `scale · B · A` attached to a frozen weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Lora {
    /// `rank × in`
    pub a: Tensor,
    /// `out × rank`
    pub b: Tensor,
    pub scale: f64,
}

/// `y = x Wᵀ + scale · (x Aᵀ) Bᵀ`, weight stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub lora: Option<Lora>,
}

impl Linear {
    /// Returns the output and, when adapted, the rank-space activation `x Aᵀ`.
    pub(crate) fn forward(&self, x: &Tensor) -> (Tensor, Option<Tensor>) {
        let mut y = matmul_bt(x, &self.weight);
        match &self.lora {
            Some(l) => {
                let u = matmul_bt(x, &l.a);
                let delta = matmul_bt(&u, &l.b);
                for (yi, di) in y.data.iter_mut().zip(&delta.data) {
                    *yi += l.scale * di;
                }
                (y, Some(u))
            }
            None => (y, None),
        }
    }

    /// Effective weight `W + scale · B · A`.
    pub fn effective_weight(&self) -> Tensor {
        let mut w = self.weight.clone();
        if let Some(l) = &self.lora {
            add_matmul(&mut w, l.scale, &l.b, &l.a);
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub up: Linear,
    pub down: Linear,
}

impl LayerParams {
    fn linear_mut(&mut self, t: LoraTarget) -> &mut Linear {
        match t {
            LoraTarget::Q => &mut self.q,
            LoraTarget::K => &mut self.k,
            LoraTarget::V => &mut self.v,
            LoraTarget::O => &mut self.o,
            LoraTarget::Up => &mut self.up,
            LoraTarget::Down => &mut self.down,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub lora_config: Option<LoraConfig>,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub span_emb: Tensor,
    pub block_emb: Tensor,
    /// `d_model × feature_dim`
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
    pub head: Tensor,
}

/// Role of a named tensor in the frozen/trainable partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Base,
    Projector,
    Adapter,
}

impl TensorRole {
    pub fn trainable_under(self, scope: TrainableScope) -> bool {
        match (scope, self) {
            (TrainableScope::Full, _) => true,
            (_, TensorRole::Adapter) => true,
            (TrainableScope::LoraAndProjector, TensorRole::Projector) => true,
            _ => false,
        }
    }
}

fn role_of(name: &str) -> TensorRole {
    if name.ends_with(".lora_a") || name.ends_with(".lora_b") {
        TensorRole::Adapter
    } else if name.starts_with("proj.") {
        TensorRole::Projector
    } else {
        TensorRole::Base
    }
}

fn normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

impl ModelParams {
    /// Deterministic initialization from `config.seed`; no adapters attached.
    pub fn init(config: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let ff = config.d_ff;
        let w_std = 1.0 / (d as f64).sqrt();
        let resid_std = w_std / (2.0 * config.n_layers as f64).sqrt();
        let lin = |rows, cols, std, rng: &mut ChaCha8Rng| Linear { weight: normal(rows, cols, std, rng), lora: None };

        let tok_emb = normal(config.vocab, d, config.embed_std, &mut rng);
        let pos_emb = normal(config.max_seq_len, d, config.embed_std, &mut rng);
        let span_emb = normal(config.max_span, d, config.embed_std, &mut rng);
        let block_emb = normal(config.max_blocks, d, config.embed_std, &mut rng);
        let proj_weight = normal(d, config.feature_dim, 1.0 / (config.feature_dim as f64).sqrt(), &mut rng);
        let proj_bias = Tensor::zeros(1, d);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gain: Tensor::filled(1, d, 1.0),
                ln1_bias: Tensor::zeros(1, d),
                q: lin(d, d, w_std, &mut rng),
                k: lin(d, d, w_std, &mut rng),
                v: lin(d, d, w_std, &mut rng),
                o: lin(d, d, resid_std, &mut rng),
                ln2_gain: Tensor::filled(1, d, 1.0),
                ln2_bias: Tensor::zeros(1, d),
                up: lin(ff, d, w_std, &mut rng),
                down: lin(d, ff, resid_std / (ff as f64 / d as f64).sqrt(), &mut rng),
            })
            .collect();
        let head = normal(config.vocab, d, w_std, &mut rng);
        ModelParams {
            config: config.clone(),
            lora_config: None,
            tok_emb,
            pos_emb,
            span_emb,
            block_emb,
            proj_weight,
            proj_bias,
            layers,
            lnf_gain: Tensor::filled(1, d, 1.0),
            lnf_bias: Tensor::zeros(1, d),
            head,
        }
    }

    /// Attaches fresh adapters: `A ~ init_scale · U(±1/√in)`, `B = 0`.
    /// Replaces any adapters already present.
    pub fn attach_lora(&mut self, cfg: &LoraConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let scale = cfg.scaling();
        for layer in &mut self.layers {
            for t in LoraTarget::ALL {
                let lin = layer.linear_mut(t);
                if cfg.targets.contains(&t) {
                    let (out, inp) = lin.weight.shape();
                    let bound = 1.0 / (inp as f64).sqrt();
                    let mut a = Tensor::uniform(cfg.rank, inp, bound, &mut rng);
                    a.scale(cfg.init_scale);
                    lin.lora = Some(Lora { a, b: Tensor::zeros(out, cfg.rank), scale });
                } else {
                    lin.lora = None;
                }
            }
        }
        self.lora_config = Some(cfg.clone());
    }

    /// Folds every adapter into its base weight: `W' = W + (α/r)·B·A`.
    pub fn merge_lora(&self) -> ModelParams {
        let mut merged = self.clone();
        for layer in &mut merged.layers {
            for t in LoraTarget::ALL {
                let lin = layer.linear_mut(t);
                if lin.lora.is_some() {
                    lin.weight = lin.effective_weight();
                    lin.lora = None;
                }
            }
        }
        merged.lora_config = None;
        merged
    }

    /// Canonical (name, tensor) listing. The order is stable and shared by
    /// [`ModelParams::tensors_mut`], checkpoints and optimizer state.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
            ("span_emb".into(), &self.span_emb),
            ("block_emb".into(), &self.block_emb),
            ("proj.weight".into(), &self.proj_weight),
            ("proj.bias".into(), &self.proj_bias),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.ln1.gain"), &l.ln1_gain));
            out.push((format!("layers.{i}.ln1.bias"), &l.ln1_bias));
            for (n, lin) in [("attn.q", &l.q), ("attn.k", &l.k), ("attn.v", &l.v), ("attn.o", &l.o)] {
                push_linear(&mut out, &format!("layers.{i}.{n}"), lin);
            }
            out.push((format!("layers.{i}.ln2.gain"), &l.ln2_gain));
            out.push((format!("layers.{i}.ln2.bias"), &l.ln2_bias));
            push_linear(&mut out, &format!("layers.{i}.mlp.up"), &l.up);
            push_linear(&mut out, &format!("layers.{i}.mlp.down"), &l.down);
        }
        out.push(("lnf.gain".into(), &self.lnf_gain));
        out.push(("lnf.bias".into(), &self.lnf_bias));
        out.push(("head.weight".into(), &self.head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
            ("span_emb".into(), &mut self.span_emb),
            ("block_emb".into(), &mut self.block_emb),
            ("proj.weight".into(), &mut self.proj_weight),
            ("proj.bias".into(), &mut self.proj_bias),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.ln1.gain"), &mut l.ln1_gain));
            out.push((format!("layers.{i}.ln1.bias"), &mut l.ln1_bias));
            for (n, lin) in [("attn.q", &mut l.q), ("attn.k", &mut l.k), ("attn.v", &mut l.v), ("attn.o", &mut l.o)] {
                push_linear_mut(&mut out, &format!("layers.{i}.{n}"), lin);
            }
            out.push((format!("layers.{i}.ln2.gain"), &mut l.ln2_gain));
            out.push((format!("layers.{i}.ln2.bias"), &mut l.ln2_bias));
            push_linear_mut(&mut out, &format!("layers.{i}.mlp.up"), &mut l.up);
            push_linear_mut(&mut out, &format!("layers.{i}.mlp.down"), &mut l.down);
        }
        out.push(("lnf.gain".into(), &mut self.lnf_gain));
        out.push(("lnf.bias".into(), &mut self.lnf_bias));
        out.push(("head.weight".into(), &mut self.head));
        out
    }

    pub fn role(name: &str) -> TensorRole {
        role_of(name)
    }

    /// `(trainable, frozen)` scalar counts under `scope`.
    pub fn count_params(&self, scope: TrainableScope) -> (usize, usize) {
        self.tensors().iter().fold((0, 0), |(t, f), (name, x)| {
            if role_of(name).trainable_under(scope) {
                (t + x.len(), f)
            } else {
                (t, f + x.len())
            }
        })
    }

    /// Same structure with zeroed tensors where `scope` allows training and
    /// empty tensors elsewhere, so frozen weights never hold a gradient.
    pub fn grad_buffer(&self, scope: TrainableScope) -> ModelParams {
        let mut g = self.clone();
        for (name, t) in g.tensors_mut() {
            if role_of(&name).trainable_under(scope) {
                *t = t.zeros_like();
            } else {
                *t = Tensor::empty();
            }
        }
        g
    }
}

fn push_linear<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, lin: &'a Linear) {
    out.push((format!("{prefix}.weight"), &lin.weight));
    if let Some(l) = &lin.lora {
        out.push((format!("{prefix}.lora_a"), &l.a));
        out.push((format!("{prefix}.lora_b"), &l.b));
    }
}

fn push_linear_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, prefix: &str, lin: &'a mut Linear) {
    out.push((format!("{prefix}.weight"), &mut lin.weight));
    if let Some(l) = &mut lin.lora {
        out.push((format!("{prefix}.lora_a"), &mut l.a));
        out.push((format!("{prefix}.lora_b"), &mut l.b));
    }
}
