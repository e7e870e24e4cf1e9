//! The optimization loop: one ICL episode (or a fixed-order micro-batch of
//! them) per step, checkpointing, and exact resumption.

mod optim;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use optim::{clip_grad_norm, optimizer_step, AdamConfig, AdamState};

use crate::corpus::Mixture;
use crate::episodes::{EpisodeConfig, EpisodeSampler, PoolRetriever, SamplerState};
use crate::error::{Error, Result};
use crate::model::checkpoint::{load_model_with, save_model, save_model_with};
use crate::model::{loss_and_grad, ModelParams, Tensor, TrainableScope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    SiclAt,
    /// Direct fine-tuning: every episode has k = 0.
    Sft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub episodes_per_step: usize,
    /// Global-norm clip; 0 disables.
    pub grad_clip_norm: f64,
    /// Seeds the episode stream.
    pub seed: u64,
    pub mode: TrainMode,
    pub scope: TrainableScope,
    pub checkpoint_every: u64,
    #[serde(flatten)]
    pub optim: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 1000,
            episodes_per_step: 1,
            grad_clip_norm: 1.0,
            seed: 0,
            mode: TrainMode::SiclAt,
            scope: TrainableScope::Lora,
            checkpoint_every: 500,
            optim: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Episode settings actually used for training: the train seed, and
    /// k = 0 in SFT mode.
    pub fn episode_config(&self, base: &EpisodeConfig) -> EpisodeConfig {
        let mut e = base.clone();
        e.seed = self.seed;
        if self.mode == TrainMode::Sft {
            e.k = 0;
        }
        e
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    /// Task of each episode in the step.
    pub tasks: Vec<String>,
    /// Demonstration count of each episode in the step.
    pub ks: Vec<usize>,
    pub loss: f64,
    /// Norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainLog {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for st in &self.steps {
            s.push_str(&serde_json::to_string(st)?);
            s.push('\n');
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Vec<StepLog>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines().filter(|l| !l.is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
    }

    /// Mean loss over the steps in `range` (1-based, inclusive bounds
    /// clamped to the log).
    pub fn mean_loss(&self, first: u64, last: u64) -> f64 {
        let sel: Vec<f64> = self.steps.iter().filter(|s| s.step >= first && s.step <= last).map(|s| s.loss).collect();
        sel.iter().sum::<f64>() / sel.len().max(1) as f64
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StateMeta {
    kind: String,
    step: u64,
    sampler: SamplerState,
    log: TrainLog,
}

/// Resumable training state.
pub struct TrainState {
    pub params: ModelParams,
    pub opt: AdamState,
    pub step: u64,
    pub log: TrainLog,
    sampler: Option<SamplerState>,
}

impl TrainState {
    pub fn save(&self, sampler: &SamplerState, path: &Path) -> Result<()> {
        let meta = StateMeta { kind: "train_state".into(), step: self.step, sampler: sampler.clone(), log: self.log.clone() };
        let extras = self.opt.to_tensors();
        let refs: Vec<(String, &Tensor)> = extras.iter().map(|(n, t)| (n.clone(), t)).collect();
        save_model_with(&self.params, &refs, path, serde_json::to_value(meta)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta, extras) = load_model_with(path, "adam.")?;
        let meta: StateMeta = serde_json::from_value(meta)?;
        if meta.kind != "train_state" {
            return Err(Error::Checkpoint(format!("{} is not a training checkpoint", path.display())));
        }
        Ok(TrainState { params, opt: AdamState::from_tensors(extras)?, step: meta.step, log: meta.log, sampler: Some(meta.sampler) })
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt-{step:07}.ckpt"))
}

/// Runs `cfg.total_steps` steps from `params`. With `out_dir`, writes a
/// resumable checkpoint every `checkpoint_every` steps and at the end,
/// plus `model.ckpt` and `train_log.jsonl`.
pub fn train(
    mixture: Arc<Mixture>,
    retrievers: Arc<Vec<PoolRetriever>>,
    params: ModelParams,
    ep_cfg: &EpisodeConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(ModelParams, TrainLog)> {
    let grads = params.grad_buffer(cfg.scope);
    if grads.tensors().iter().all(|(_, t)| t.is_empty()) {
        return Err(Error::Config(format!("nothing to train under scope {:?}", cfg.scope)));
    }
    let state = TrainState { opt: AdamState::new(&grads), params, step: 0, log: TrainLog::default(), sampler: None };
    run(state, mixture, retrievers, ep_cfg, cfg, out_dir)
}

/// Continues a run from a checkpoint written by [`train`] up to
/// `cfg.total_steps`.
pub fn resume(
    checkpoint: &Path,
    mixture: Arc<Mixture>,
    retrievers: Arc<Vec<PoolRetriever>>,
    ep_cfg: &EpisodeConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(ModelParams, TrainLog)> {
    run(TrainState::load(checkpoint)?, mixture, retrievers, ep_cfg, cfg, out_dir)
}

fn run(
    mut state: TrainState,
    mixture: Arc<Mixture>,
    retrievers: Arc<Vec<PoolRetriever>>,
    ep_cfg: &EpisodeConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(ModelParams, TrainLog)> {
    let mut sampler = EpisodeSampler::new(mixture, retrievers, cfg.episode_config(ep_cfg))?;
    if let Some(s) = &state.sampler {
        sampler.restore(s)?;
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let n_eps = cfg.episodes_per_step.max(1);
    while state.step < cfg.total_steps {
        let step = state.step + 1;
        let episodes = (0..n_eps).map(|_| sampler.next_episode()).collect::<Result<Vec<_>>>()?;
        let params = &state.params;
        let results: Vec<Result<_>> =
            episodes.par_iter().map(|e| loss_and_grad(params, &e.input, &e.loss_mask, cfg.scope)).collect();
        let mut loss = 0.0;
        let mut grads: Option<ModelParams> = None;
        // fixed summation order keeps the result independent of thread scheduling
        for r in results {
            let lg = r.map_err(|e| if e.is_numeric() { Error::NonFiniteLoss { step } } else { e })?;
            loss += lg.loss;
            match &mut grads {
                None => grads = Some(lg.grads),
                Some(g) => {
                    for ((_, a), (_, b)) in g.tensors_mut().into_iter().zip(lg.grads.tensors()) {
                        if !a.is_empty() {
                            a.add_assign(b);
                        }
                    }
                }
            }
        }
        let mut grads = grads.expect("at least one episode");
        if n_eps > 1 {
            loss /= n_eps as f64;
            for (_, t) in grads.tensors_mut() {
                t.scale(1.0 / n_eps as f64);
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        optimizer_step(&mut state.params, &grads, &mut state.opt, &cfg.optim, step)?;
        state.step = step;
        state.log.steps.push(StepLog {
            step,
            tasks: episodes.iter().map(|e| e.task.clone()).collect(),
            ks: episodes.iter().map(|e| e.k()).collect(),
            loss,
            grad_norm,
            lr: cfg.optim.lr_at(step),
        });
        if step % 100 == 0 {
            log::info!("step {step}: loss {:.4} (mean of last 100: {:.4})", loss, state.log.mean_loss(step - 99, step));
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.total_steps {
                write_checkpoint(&mut state, &sampler, dir)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        write_checkpoint(&mut state, &sampler, dir)?;
        save_model(&state.params, &dir.join("model.ckpt"), serde_json::json!({ "step": state.step }))?;
        state.log.write_jsonl(&dir.join("train_log.jsonl"))?;
    }
    Ok((state.params, state.log))
}

fn write_checkpoint(state: &mut TrainState, sampler: &EpisodeSampler, dir: &Path) -> Result<()> {
    let path = checkpoint_path(dir, state.step);
    if !state.log.checkpoints.contains(&path) {
        state.log.checkpoints.push(path.clone());
    }
    state.save(&sampler.state(), &path)
}
