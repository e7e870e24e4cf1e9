//! Experiment bundles: world, model, mixture, training and evaluation
//! settings for each named run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::world::ST_TASKS;
use super::WorldSpec;
use crate::corpus::{MixtureConfig, MixtureEntry, TaskId, Weighting};
use crate::episodes::{EpisodeConfig, PromptTemplate};
use crate::error::{Error, Result};
use crate::metrics::{BleuConfig, Normalizer};
use crate::model::{LoraConfig, ModelConfig, TrainableScope};
use crate::train::{AdamConfig, TrainConfig, TrainMode};

/// Names accepted by [`preset_experiment`]. `base` pretrains the model
/// the other presets start from.
pub const PRESETS: [&str; 6] = ["base", "sicl_at1", "sicl_at2", "sicl_at3", "sft_baseline", "cv_transfer"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteKind {
    /// Capped word error rate.
    Asr,
    /// Capped character error rate.
    AsrChar,
    /// Corpus BLEU.
    St,
    /// Multiple-choice accuracy.
    Sqa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub name: String,
    pub task: String,
    pub kind: SuiteKind,
    /// Evaluate only the first `max_items` queries.
    #[serde(default)]
    pub max_items: Option<usize>,
}

impl SuiteSpec {
    pub fn new(name: &str, task: &str, kind: SuiteKind) -> Self {
        SuiteSpec { name: name.into(), task: task.into(), kind, max_items: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    /// Shots of the few-shot column; zero-shot is always evaluated.
    pub k: usize,
    pub max_new_tokens: usize,
    pub suites: Vec<SuiteSpec>,
    pub bleu: BleuConfig,
    pub normalizer: Normalizer,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            k: 4,
            max_new_tokens: 24,
            suites: vec![
                SuiteSpec::new("myst", "myst", SuiteKind::Asr),
                SuiteSpec::new("rsr", "rsr", SuiteKind::Asr),
                SuiteSpec::new("st_unseen", "st_unseen", SuiteKind::St),
                SuiteSpec::new("sqa", "sqa_test", SuiteKind::Sqa),
            ],
            bleu: BleuConfig { chars: true, ..BleuConfig::default() },
            normalizer: Normalizer::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub preset: String,
    pub seed: u64,
    /// Preset whose trained model this run starts from.
    #[serde(default)]
    pub init_from: Option<String>,
    pub world: WorldSpec,
    pub model: ModelConfig,
    pub lora: LoraConfig,
    pub mixture: MixtureConfig,
    pub episodes: EpisodeConfig,
    pub train: TrainConfig,
    pub eval: EvalSpec,
}

impl Experiment {
    /// Propagates `seed` into the model, adapter, episode and training
    /// seeds. The world keeps its own seed, so every run sees the same data.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self.lora.seed = seed;
        self.train.seed = seed;
        self.episodes.seed = seed;
        self
    }

    /// Mixture task ids followed by suite task ids, without duplicates.
    pub fn needed_tasks(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in self.mixture.entries.iter().map(|e| &e.task).chain(self.eval.suites.iter().map(|s| &s.task)) {
            if !out.contains(t) {
                out.push(t.clone());
            }
        }
        out
    }
}

fn entries(tasks: &[&str]) -> Vec<MixtureEntry> {
    tasks.iter().map(|t| MixtureEntry::new(*t)).collect()
}

fn proportional(name: &str, tasks: &[&str]) -> MixtureConfig {
    MixtureConfig { name: name.into(), weighting: Weighting::Proportional, entries: entries(tasks) }
}

/// Translation prompts name the target language after the input, e.g.
/// `{input} >zh{sep}{target}{demo_sep}`.
pub fn st_templates() -> BTreeMap<TaskId, PromptTemplate> {
    ST_TASKS
        .iter()
        .map(|(task, _, lang)| (task.to_string(), PromptTemplate::parse(&format!("{{input}} >{lang}{{sep}}{{target}}{{demo_sep}}")).unwrap()))
        .collect()
}

/// The bundle for `name`, at seed 0 (see [`Experiment::with_seed`]).
pub fn preset_experiment(name: &str) -> Result<Experiment> {
    let world = WorldSpec::default();
    let model = ModelConfig { n_layers: 3, max_seq_len: 256, max_blocks: 8, ..ModelConfig::default() };
    let episodes = EpisodeConfig { k: 4, max_seq_len: model.max_seq_len, task_templates: st_templates(), ..EpisodeConfig::default() };
    let adapted = TrainConfig {
        total_steps: 1500,
        checkpoint_every: 500,
        scope: TrainableScope::Lora,
        optim: AdamConfig { learning_rate: 1e-3, ..AdamConfig::default() },
        ..TrainConfig::default()
    };
    let at1 = proportional("sicl_at1", &["asr_en"]);
    let at2 = at1.extend("sicl_at2", entries(&["st_en_zh", "st_de_en", "st_zh_en", "st_pt_en"]));
    let mut exp = Experiment {
        preset: name.into(),
        seed: 0,
        init_from: Some("base".into()),
        world: world.clone(),
        model,
        lora: LoraConfig::default(),
        mixture: at1.clone(),
        episodes,
        train: adapted.clone(),
        eval: EvalSpec::default(),
    };
    match name {
        "base" => {
            let pre: Vec<String> = (0..world.pretrain_domains).map(|i| format!("pre{i}")).collect();
            let pre: Vec<&str> = pre.iter().map(String::as_str).collect();
            exp.init_from = None;
            exp.mixture = MixtureConfig::new("base", entries(&pre));
            exp.episodes.k_random = true;
            exp.episodes.zero_shot_prob = 0.1;
            exp.episodes.key_noise = 0.25;
            exp.train = TrainConfig {
                total_steps: 30_000,
                checkpoint_every: 10_000,
                scope: TrainableScope::Full,
                optim: AdamConfig { learning_rate: 1e-3, ..AdamConfig::default() },
                ..TrainConfig::default()
            };
        }
        "sicl_at1" => {}
        "sicl_at2" => exp.mixture = at2,
        "sicl_at3" => exp.mixture = at2.extend("sicl_at3", entries(&["sqa"])),
        "sft_baseline" => {
            exp.mixture = MixtureConfig::new("sft_baseline", entries(&["rsr_train"]));
            exp.train.mode = TrainMode::Sft;
            exp.train.total_steps = 500;
        }
        "cv_transfer" => {
            exp.mixture = MixtureConfig::new("cv_transfer", entries(&["asr_en"]));
            exp.train.mode = TrainMode::Sft;
        }
        other => return Err(Error::UnknownPreset(other.into())),
    }
    Ok(exp)
}
