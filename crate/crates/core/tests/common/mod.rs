#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use siclat::corpus::{Mixture, MixtureConfig, MixtureEntry, Sample, SampleInput, TaskDataset, TaskId};
use siclat::episodes::{build_retrievers, EpisodeConfig, PoolRetriever};
use siclat::model::{LoraConfig, ModelConfig, ModelParams};

pub const WORDS: [&str; 12] = ["red", "fox", "box", "sky", "sea", "fix", "blue", "grey", "tan", "sun", "cat", "cap"];

pub fn text_sample(id: &str, task: &str, target: &str) -> Sample {
    Sample {
        id: id.into(),
        task: task.into(),
        input: SampleInput::Text(target.to_uppercase()),
        target: target.into(),
        choices: None,
        tags: BTreeMap::new(),
        retrieval_key: None,
    }
}

/// `n` two-word text samples of `task`, deterministic in `offset`.
pub fn samples(task: &str, n: usize, offset: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let j = i + offset;
            let t = format!("{} {}", WORDS[j % 12], WORDS[(j * 7 + 3) % 12]);
            text_sample(&format!("{task}-{j:04}"), task, &t)
        })
        .collect()
}

pub fn small_model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 96,
        feature_dim: 4,
        max_span: 32,
        max_blocks: 6,
        seed: 1,
        ..ModelConfig::default()
    }
}

pub fn adapted_model() -> ModelParams {
    let mut p = ModelParams::init(&small_model());
    p.attach_lora(&LoraConfig { seed: 2, ..LoraConfig::default() });
    p
}

/// Two text tasks: a split one and a leave-one-out one.
pub fn two_task_mixture() -> (Arc<Mixture>, Arc<Vec<PoolRetriever>>) {
    let a = TaskDataset::split("a", samples("a", 12, 0), samples("a", 20, 100)).unwrap();
    let b = TaskDataset::leave_one_out("b", samples("b", 15, 50)).unwrap();
    let map: BTreeMap<TaskId, Arc<TaskDataset>> = [("a".to_string(), Arc::new(a)), ("b".to_string(), Arc::new(b))].into();
    let cfg = MixtureConfig::new("m", vec![MixtureEntry::new("a"), MixtureEntry::new("b")]);
    let m = Arc::new(cfg.build(&map).unwrap());
    let r = Arc::new(build_retrievers(&m, 64).unwrap());
    (m, r)
}

pub fn episode_config(k: usize) -> EpisodeConfig {
    EpisodeConfig { k, max_seq_len: 96, embed_dim: 64, ..EpisodeConfig::default() }
}

/// A preset shrunk to run in a second or two.
pub fn tiny_experiment(preset: &str) -> siclat::synthbench::Experiment {
    let mut e = siclat::synthbench::preset_experiment(preset).unwrap();
    e.world.scale = 0.01;
    e.world.eval_queries = 6;
    e.world.eval_pool = 30;
    e.world.sft_items = 30;
    e.world.pretrain_domains = 2;
    e.world.pretrain_items = 40;
    if preset == "base" {
        e.mixture = MixtureConfig::new("base", vec![MixtureEntry::new("pre0"), MixtureEntry::new("pre1")]);
    }
    e.model = ModelConfig { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, feature_dim: e.world.feature_dim, ..e.model };
    e.train.total_steps = 4;
    e.train.checkpoint_every = 0;
    e.eval.max_new_tokens = 6;
    e.eval.k = 2;
    e
}
