//! Episode construction: task and query sampling, demonstration retrieval,
//! and ICL-formatted sequence assembly.

mod assemble;
mod template;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use assemble::{assemble_sequence, make_eval_prompt, render_choices, Assembled, Demo};
pub use template::{PromptTemplate, Segment, DEFAULT_TEMPLATE};

use crate::corpus::{Mixture, Sample, TaskDataset, TaskId};
use crate::error::{Error, Result};
use crate::model::ModelInput;
use crate::retrieval::{cosine, fallback_embed, EmbeddingIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DemoOrder {
    /// Most similar demonstration adjacent to the query.
    #[default]
    SimilarLast,
    SimilarFirst,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub k: usize,
    /// Draw the shot count uniformly from `1..=k` per episode.
    pub k_random: bool,
    pub max_seq_len: usize,
    pub demo_order: DemoOrder,
    pub seed: u64,
    /// Also put loss on demonstration targets.
    pub supervise_demos: bool,
    /// Probability of replacing kNN demonstrations by random pool members.
    pub random_demo_prob: f64,
    /// Probability that an episode has no demonstrations at all.
    pub zero_shot_prob: f64,
    /// Per-character probability of corrupting the retrieval key, so that
    /// training retrieval resembles retrieval by an imperfect hypothesis.
    pub key_noise: f64,
    /// Dimension of the fallback text embedding.
    pub embed_dim: usize,
    pub template: PromptTemplate,
    /// Per-task templates that override `template`.
    pub task_templates: BTreeMap<TaskId, PromptTemplate>,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            k: 4,
            k_random: false,
            max_seq_len: 320,
            demo_order: DemoOrder::SimilarLast,
            seed: 0,
            supervise_demos: false,
            random_demo_prob: 0.0,
            zero_shot_prob: 0.0,
            key_noise: 0.0,
            embed_dim: 128,
            template: PromptTemplate::default(),
            task_templates: BTreeMap::new(),
        }
    }
}

impl EpisodeConfig {
    pub fn template_for(&self, task: &str) -> &PromptTemplate {
        self.task_templates.get(task).unwrap_or(&self.template)
    }
}

/// k demonstrations and one query, assembled.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub task: TaskId,
    pub query: Arc<Sample>,
    /// Demonstrations in sequence order.
    pub demos: Vec<Demo>,
    pub input: ModelInput,
    pub loss_mask: Vec<bool>,
}

impl Episode {
    pub fn k(&self) -> usize {
        self.demos.len()
    }
}

/// kNN index over one task's demonstration pool.
#[derive(Debug, Clone)]
pub struct PoolRetriever {
    pub task: TaskId,
    index: EmbeddingIndex,
    pool: HashMap<String, Arc<Sample>>,
    pool_ids: Vec<String>,
    leave_one_out: bool,
    precomputed: Option<Arc<HashMap<String, Vec<f64>>>>,
}

impl PoolRetriever {
    /// Indexes the pool by fallback embeddings of each sample's key text,
    /// or by `precomputed` vectors when given (which must then cover every
    /// pool id and every query id later embedded).
    pub fn build(ds: &TaskDataset, dim: usize, precomputed: Option<Arc<HashMap<String, Vec<f64>>>>) -> Result<Self> {
        let dim = match &precomputed {
            Some(p) => p.values().next().map(|v| v.len()).unwrap_or(dim),
            None => dim,
        };
        let mut index = EmbeddingIndex::new(dim)?;
        let mut pool = HashMap::with_capacity(ds.demo_pool.len());
        let mut pool_ids = Vec::with_capacity(ds.demo_pool.len());
        let mut me = PoolRetriever {
            task: ds.task.clone(),
            index: EmbeddingIndex::new(dim)?,
            pool: HashMap::new(),
            pool_ids: Vec::new(),
            leave_one_out: ds.leave_one_out,
            precomputed,
        };
        for s in &ds.demo_pool {
            index.insert(s.id.clone(), &me.embed(&s.id, s.key_text())?)?;
            pool.insert(s.id.clone(), s.clone());
            pool_ids.push(s.id.clone());
        }
        me.index = index;
        me.pool = pool;
        me.pool_ids = pool_ids;
        Ok(me)
    }

    /// Embedding of a key: the precomputed vector for `id` if any,
    /// otherwise the fallback embedding of `text`.
    pub fn embed(&self, id: &str, text: &str) -> Result<Vec<f64>> {
        match &self.precomputed {
            Some(p) => p.get(id).cloned().ok_or_else(|| Error::Config(format!("no precomputed embedding for {id:?}"))),
            None => fallback_embed(text, self.index.dim()),
        }
    }

    pub fn pool_len(&self) -> usize {
        self.pool_ids.len()
    }

    fn exclusions(&self, query: &Sample) -> HashSet<String> {
        let mut ex = HashSet::new();
        if self.leave_one_out || self.pool.contains_key(&query.id) {
            ex.insert(query.id.clone());
        }
        ex
    }

    /// Top-`k` pool samples by cosine similarity to `key`, best first.
    pub fn retrieve(&self, query: &Sample, key: &[f64], k: usize) -> Result<Vec<Demo>> {
        if k == 0 {
            return Ok(Vec::new());
        }
        let hits = self.index.knn(key, k, &self.exclusions(query))?;
        Ok(hits.into_iter().map(|(id, score)| Demo { sample: self.pool[&id].clone(), score }).collect())
    }

    /// `k` uniformly drawn pool samples (query excluded), best first.
    pub fn random_demos<R: Rng + ?Sized>(&self, query: &Sample, key: &[f64], k: usize, rng: &mut R) -> Result<Vec<Demo>> {
        let ex = self.exclusions(query);
        let available = self.pool_len() - ex.len();
        if k > available {
            return Err(Error::PoolTooSmall { k, available });
        }
        let picks = rand::seq::index::sample(rng, self.pool_len(), (k + ex.len()).min(self.pool_len()));
        let mut demos: Vec<Demo> = picks
            .into_iter()
            .map(|i| &self.pool_ids[i])
            .filter(|id| !ex.contains(*id))
            .take(k)
            .map(|id| Demo { sample: self.pool[id].clone(), score: cosine(self.index.vector(id).unwrap(), key) })
            .collect();
        demos.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.sample.id.cmp(&b.sample.id)));
        Ok(demos)
    }
}

/// Replaces each non-space character of `text` with probability `p` by a
/// character drawn from `text` itself.
pub fn corrupt_key<R: Rng + ?Sized>(text: &str, p: f64, rng: &mut R) -> String {
    let letters: Vec<char> = text.chars().filter(|c| !c.is_whitespace()).collect();
    text.chars()
        .map(|c| if !c.is_whitespace() && rng.random::<f64>() < p { letters[rng.random_range(0..letters.len())] } else { c })
        .collect()
}

/// Puts best-first demonstrations into sequence order.
pub fn order_demos<R: Rng + ?Sized>(mut demos: Vec<Demo>, order: DemoOrder, rng: &mut R) -> Vec<Demo> {
    match order {
        DemoOrder::SimilarFirst => {}
        DemoOrder::SimilarLast => demos.reverse(),
        DemoOrder::Random => demos.shuffle(rng),
    }
    demos
}

/// Position of a task's query cursor: queries are visited in a fresh
/// permutation each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Cursor {
    pub epoch: u64,
    pub pos: usize,
}

/// Everything needed to continue an episode stream exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub seed: u64,
    pub word_pos: u128,
    pub cursors: Vec<Cursor>,
}

/// Deterministic episode stream over a mixture.
pub struct EpisodeSampler {
    mixture: Arc<Mixture>,
    retrievers: Arc<Vec<PoolRetriever>>,
    cfg: EpisodeConfig,
    rng: ChaCha8Rng,
    cursors: Vec<Cursor>,
    perms: Vec<Vec<u32>>,
}

/// One retriever per mixture task, in mixture order.
pub fn build_retrievers(mixture: &Mixture, dim: usize) -> Result<Vec<PoolRetriever>> {
    mixture.tasks.iter().map(|t| PoolRetriever::build(t, dim, None)).collect()
}

fn epoch_perm(seed: u64, task: usize, epoch: u64, n: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(task as u64 + 1));
    rng.set_stream(epoch);
    let mut p: Vec<u32> = (0..n as u32).collect();
    p.shuffle(&mut rng);
    p
}

impl EpisodeSampler {
    pub fn new(mixture: Arc<Mixture>, retrievers: Arc<Vec<PoolRetriever>>, cfg: EpisodeConfig) -> Result<Self> {
        if retrievers.len() != mixture.tasks.len() {
            return Err(Error::Config("one retriever per mixture task required".into()));
        }
        let n = mixture.tasks.len();
        let mut s = EpisodeSampler {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            mixture,
            retrievers,
            cfg,
            cursors: vec![Cursor::default(); n],
            perms: vec![Vec::new(); n],
        };
        for c in 0..n {
            s.refresh_perm(c);
        }
        Ok(s)
    }

    fn refresh_perm(&mut self, c: usize) {
        self.perms[c] = epoch_perm(self.cfg.seed, c, self.cursors[c].epoch, self.mixture.tasks[c].len());
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.cfg
    }

    pub fn state(&self) -> SamplerState {
        SamplerState { seed: self.cfg.seed, word_pos: self.rng.get_word_pos(), cursors: self.cursors.clone() }
    }

    pub fn restore(&mut self, state: &SamplerState) -> Result<()> {
        if state.seed != self.cfg.seed || state.cursors.len() != self.cursors.len() {
            return Err(Error::Checkpoint("sampler state does not match this mixture/seed".into()));
        }
        self.rng = ChaCha8Rng::seed_from_u64(state.seed);
        self.rng.set_word_pos(state.word_pos);
        self.cursors = state.cursors.clone();
        for c in 0..self.cursors.len() {
            self.refresh_perm(c);
        }
        Ok(())
    }

    fn next_query(&mut self, c: usize) -> Arc<Sample> {
        if self.cursors[c].pos >= self.perms[c].len() {
            self.cursors[c] = Cursor { epoch: self.cursors[c].epoch + 1, pos: 0 };
            self.refresh_perm(c);
        }
        let i = self.perms[c][self.cursors[c].pos] as usize;
        self.cursors[c].pos += 1;
        self.mixture.tasks[c].query_set[i].clone()
    }

    /// Draws a task, a query and its demonstrations, and assembles them.
    pub fn next_episode(&mut self) -> Result<Episode> {
        let c = self.mixture.sample_task(&mut self.rng);
        let query = self.next_query(c);
        let mut k = if self.cfg.k > 0 && self.cfg.k_random { self.rng.random_range(1..=self.cfg.k) } else { self.cfg.k };
        if self.cfg.zero_shot_prob > 0.0 && self.rng.random::<f64>() < self.cfg.zero_shot_prob {
            k = 0;
        }
        let use_random = self.cfg.random_demo_prob > 0.0 && self.rng.random::<f64>() < self.cfg.random_demo_prob;
        let demos = if k == 0 {
            Vec::new()
        } else {
            let r = &self.retrievers[c];
            let key = if self.cfg.key_noise > 0.0 {
                let noisy = corrupt_key(query.key_text(), self.cfg.key_noise, &mut self.rng);
                r.embed(&query.id, &noisy)?
            } else {
                r.embed(&query.id, query.key_text())?
            };
            if use_random {
                r.random_demos(&query, &key, k, &mut self.rng)?
            } else {
                r.retrieve(&query, &key, k)?
            }
        };
        let demos = order_demos(demos, self.cfg.demo_order, &mut self.rng);
        let template = self.cfg.template_for(&self.mixture.tasks[c].task);
        let a = assemble_sequence(&demos, &query, template, self.cfg.max_seq_len, self.cfg.supervise_demos)?;
        let demos = a.demos_kept.iter().map(|&i| demos[i].clone()).collect();
        Ok(Episode { task: self.mixture.tasks[c].task.clone(), query, demos, input: a.input, loss_mask: a.loss_mask })
    }
}

impl Iterator for EpisodeSampler {
    type Item = Result<Episode>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_episode())
    }
}
