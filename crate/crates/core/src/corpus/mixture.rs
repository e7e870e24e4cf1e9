use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{TaskDataset, TaskId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Use each entry's `weight` (all 1.0 gives uniform task sampling).
    #[default]
    Explicit,
    /// Weight each task by its number of query samples.
    Proportional,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureEntry {
    pub task: TaskId,
    /// Use only the first `sample_count` queries of the task.
    #[serde(default)]
    pub sample_count: Option<usize>,
    #[serde(default = "one")]
    pub weight: f64,
}

impl MixtureEntry {
    pub fn new(task: impl Into<TaskId>) -> Self {
        MixtureEntry { task: task.into(), sample_count: None, weight: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureConfig {
    pub name: String,
    #[serde(default)]
    pub weighting: Weighting,
    pub entries: Vec<MixtureEntry>,
}

impl MixtureConfig {
    pub fn new(name: impl Into<String>, entries: Vec<MixtureEntry>) -> Self {
        MixtureConfig { name: name.into(), weighting: Weighting::Explicit, entries }
    }

    /// This mixture plus `extra` entries, under a new name.
    pub fn extend(&self, name: impl Into<String>, extra: Vec<MixtureEntry>) -> Self {
        let mut entries = self.entries.clone();
        entries.extend(extra);
        MixtureConfig { name: name.into(), weighting: self.weighting, entries }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("mixture config serializes")
    }

    /// Resolves every entry against `datasets`.
    pub fn build(&self, datasets: &BTreeMap<TaskId, Arc<TaskDataset>>) -> Result<Mixture> {
        if self.entries.is_empty() {
            return Err(Error::Mixture(format!("mixture {:?} has no entries", self.name)));
        }
        let mut tasks = Vec::new();
        let mut weights = Vec::new();
        for e in &self.entries {
            let ds = datasets.get(&e.task).ok_or_else(|| Error::UnknownTask(e.task.clone()))?;
            let ds = match e.sample_count {
                Some(n) if n > ds.len() => {
                    return Err(Error::Mixture(format!("task {:?} has {} queries, {n} requested", e.task, ds.len())))
                }
                Some(n) if n < ds.len() => Arc::new(ds.with_query_limit(n)),
                _ => ds.clone(),
            };
            if ds.is_empty() {
                return Err(Error::Mixture(format!("task {:?} has no queries", e.task)));
            }
            let w = match self.weighting {
                Weighting::Explicit => e.weight,
                Weighting::Proportional => ds.len() as f64,
            };
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Mixture(format!("weight {w} for task {:?}", e.task)));
            }
            tasks.push(ds);
            weights.push(w);
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Mixture("weights sum to zero".into()));
        }
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        Ok(Mixture { name: self.name.clone(), tasks, weights, cumulative })
    }
}

/// Sampling-ready mixture of task datasets.
#[derive(Debug, Clone)]
pub struct Mixture {
    pub name: String,
    pub tasks: Vec<Arc<TaskDataset>>,
    pub weights: Vec<f64>,
    cumulative: Vec<f64>,
}

impl Mixture {
    /// Index into `tasks`, drawn with probability proportional to weight.
    pub fn sample_task<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.cumulative.iter().position(|&c| u < c).unwrap_or_else(|| {
            // rounding at the top end: last task with positive weight
            self.weights.iter().rposition(|&w| w > 0.0).unwrap()
        })
    }

    pub fn task_ids(&self) -> Vec<&str> {
        self.tasks.iter().map(|t| t.task.as_str()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::text_sample;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn datasets() -> BTreeMap<TaskId, Arc<TaskDataset>> {
        let mk = |task: &str, nq: usize| {
            let q = (0..nq).map(|i| text_sample(&format!("{task}q{i}"), task, "x", "y")).collect();
            let p = vec![text_sample(&format!("{task}p"), task, "x", "y")];
            (task.to_string(), Arc::new(TaskDataset::split(task, q, p).unwrap()))
        };
        [mk("asr", 30), mk("st", 10)].into_iter().collect()
    }

    #[test]
    fn single_entry_always_yields_it() {
        let m = MixtureConfig::new("a", vec![MixtureEntry::new("asr")]).build(&datasets()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..100).all(|_| m.sample_task(&mut rng) == 0));
    }

    #[test]
    fn unresolved_task_is_an_error() {
        let cfg = MixtureConfig::new("a", vec![MixtureEntry::new("sqa")]);
        assert!(matches!(cfg.build(&datasets()), Err(Error::UnknownTask(t)) if t == "sqa"));
    }

    #[test]
    fn proportional_weights_and_limits() {
        let mut cfg = MixtureConfig::new("a", vec![MixtureEntry::new("asr"), MixtureEntry::new("st")]);
        cfg.weighting = Weighting::Proportional;
        cfg.entries[0].sample_count = Some(20);
        let m = cfg.build(&datasets()).unwrap();
        assert_eq!(m.weights, vec![20.0, 10.0]);
        assert_eq!(m.tasks[0].len(), 20);
        cfg.entries[0].sample_count = Some(31);
        assert!(cfg.build(&datasets()).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let text = "name = \"SICL-AT1\"\n\n[[entries]]\ntask = \"asr\"\nsample_count = 16368\n";
        let cfg = MixtureConfig::from_toml(text).unwrap();
        assert_eq!(cfg.entries[0].weight, 1.0);
        assert_eq!(cfg.entries[0].sample_count, Some(16368));
        assert_eq!(MixtureConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let at2 = cfg.extend("SICL-AT2", vec![MixtureEntry::new("st")]);
        assert_eq!(at2.entries[..1], cfg.entries[..]);
    }
}
