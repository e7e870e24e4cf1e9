//! Samples, per-task datasets, JSON Lines manifests and training mixtures.

pub mod featmat;
mod manifest;
mod mixture;

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

pub use featmat::FeatureSeq;
pub use manifest::{load_manifest, save_manifest, sidecar_path};
pub use mixture::{Mixture, MixtureConfig, MixtureEntry, Weighting};

use crate::error::{Error, Result};
use crate::metrics::CHOICE_LABELS;

pub type TaskId = String;

#[derive(Debug, Clone, PartialEq)]
pub enum SampleInput {
    Features(FeatureSeq),
    Text(String),
}

/// One labeled instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub task: TaskId,
    pub input: SampleInput,
    /// Transcript, translation, or answer letter.
    pub target: String,
    /// Answer strings, rendered as `A) … B) …`; `target` is then a label.
    pub choices: Option<Vec<String>>,
    pub tags: BTreeMap<String, String>,
    /// Text used for demonstration retrieval instead of `target`.
    pub retrieval_key: Option<String>,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Error::InvalidSample { id: self.id.clone(), msg: msg.to_string() };
        if self.id.is_empty() {
            return Err(bad("empty id"));
        }
        if self.target.is_empty() {
            return Err(bad("empty target"));
        }
        if let Some(choices) = &self.choices {
            if choices.is_empty() || choices.len() > CHOICE_LABELS.len() {
                return Err(bad("choice count out of range"));
            }
            let labels: Vec<String> = CHOICE_LABELS[..choices.len()].iter().map(|c| c.to_string()).collect();
            if !labels.contains(&self.target) {
                return Err(bad("target is not a choice label"));
            }
        }
        if let SampleInput::Features(f) = &self.input {
            if f.rows == 0 || f.cols == 0 {
                return Err(bad("empty feature matrix"));
            }
        }
        Ok(())
    }

    /// Text whose embedding represents this sample in a demonstration pool.
    pub fn key_text(&self) -> &str {
        self.retrieval_key.as_deref().unwrap_or(&self.target)
    }

    /// Gold label as a char for multiple-choice samples.
    pub fn gold_label(&self) -> Option<char> {
        self.choices.as_ref().and_then(|_| self.target.chars().next())
    }
}

/// Query set and demonstration pool of one task. With `leave_one_out` the
/// two share samples and retrieval excludes the query itself.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task: TaskId,
    pub query_set: Vec<Arc<Sample>>,
    pub demo_pool: Vec<Arc<Sample>>,
    pub leave_one_out: bool,
}

impl TaskDataset {
    /// Disjoint query set and pool.
    pub fn split(task: impl Into<TaskId>, query: Vec<Sample>, pool: Vec<Sample>) -> Result<Self> {
        let ds = TaskDataset {
            task: task.into(),
            query_set: query.into_iter().map(Arc::new).collect(),
            demo_pool: pool.into_iter().map(Arc::new).collect(),
            leave_one_out: false,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Every sample is both a query and a pool member.
    pub fn leave_one_out(task: impl Into<TaskId>, samples: Vec<Sample>) -> Result<Self> {
        let shared: Vec<Arc<Sample>> = samples.into_iter().map(Arc::new).collect();
        let ds = TaskDataset { task: task.into(), query_set: shared.clone(), demo_pool: shared, leave_one_out: true };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.demo_pool.is_empty() {
            return Err(Error::Config(format!("task {:?} has an empty demonstration pool", self.task)));
        }
        let mut query_ids = HashSet::new();
        for s in &self.query_set {
            self.check_member(s)?;
            if !query_ids.insert(s.id.as_str()) {
                return Err(Error::DuplicateId(s.id.clone()));
            }
        }
        let mut pool_ids = HashSet::new();
        for s in &self.demo_pool {
            self.check_member(s)?;
            if !pool_ids.insert(s.id.as_str()) {
                return Err(Error::DuplicateId(s.id.clone()));
            }
            if !self.leave_one_out && query_ids.contains(s.id.as_str()) {
                return Err(Error::DuplicateId(s.id.clone()));
            }
        }
        Ok(())
    }

    fn check_member(&self, s: &Sample) -> Result<()> {
        if s.task != self.task {
            return Err(Error::InvalidSample { id: s.id.clone(), msg: format!("task {:?} in dataset {:?}", s.task, self.task) });
        }
        s.validate()
    }

    pub fn len(&self) -> usize {
        self.query_set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query_set.is_empty()
    }

    /// Number of distinct samples across query set and pool.
    pub fn n_unique(&self) -> usize {
        let mut ids: HashSet<&str> = self.query_set.iter().map(|s| s.id.as_str()).collect();
        ids.extend(self.demo_pool.iter().map(|s| s.id.as_str()));
        ids.len()
    }

    /// Same dataset restricted to the first `n` queries.
    pub fn with_query_limit(&self, n: usize) -> TaskDataset {
        let mut ds = self.clone();
        ds.query_set.truncate(n);
        ds
    }
}
