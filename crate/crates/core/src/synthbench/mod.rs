//! Deterministic synthetic speech-like tasks. Each character of an
//! utterance is rendered as `frame_rate` noisy copies of its domain
//! prototype vector; domains differ by an additive offset and by permuted
//! prototype assignments.

mod presets;
mod world;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use presets::{preset_experiment, st_templates, EvalSpec, Experiment, SuiteKind, SuiteSpec, PRESETS};
pub use world::{World, WorldSpec, ST_TASKS, TABLE1};

use crate::corpus::{FeatureSeq, Sample, SampleInput, TaskDataset, TaskId};
use crate::error::{Error, Result};
use crate::retrieval::cosine;

/// Acoustic domain: character prototypes, offset, and noise levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: String,
    pub prototypes: BTreeMap<char, Vec<f32>>,
    pub shift: Vec<f32>,
    /// Per-frame noise standard deviation.
    pub noise_sigma: f32,
    /// Per-utterance random offset standard deviation (speaker variation).
    pub speaker_sigma: f32,
    pub frame_rate: usize,
}

impl DomainSpec {
    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Error::Config(format!("domain {}: {m}", self.id));
        if !(self.noise_sigma >= 0.0 && self.speaker_sigma >= 0.0) {
            return Err(bad("negative noise".into()));
        }
        if self.frame_rate == 0 {
            return Err(bad("frame rate must be positive".into()));
        }
        let protos: Vec<(&char, Vec<f64>)> =
            self.prototypes.iter().map(|(c, v)| (c, v.iter().map(|&x| x as f64).collect())).collect();
        for (i, (a, va)) in protos.iter().enumerate() {
            if va.len() != self.dim() {
                return Err(bad(format!("prototype {a:?} has dimension {}", va.len())));
            }
            for (b, vb) in &protos[i + 1..] {
                let c = cosine(va, vb);
                if c >= 0.8 {
                    return Err(bad(format!("prototypes {a:?} and {b:?} have cosine {c:.3}")));
                }
            }
        }
        Ok(())
    }

    /// Frames for `text`: prototype + shift (+ speaker offset) + noise, each
    /// character repeated `frame_rate` times.
    pub fn render<R: Rng + ?Sized>(&self, text: &str, rng: &mut R) -> Result<FeatureSeq> {
        let d = self.dim();
        let speaker: Vec<f32> = if self.speaker_sigma > 0.0 {
            let n = Normal::new(0.0, self.speaker_sigma as f64).unwrap();
            (0..d).map(|_| n.sample(rng) as f32).collect()
        } else {
            vec![0.0; d]
        };
        let noise = (self.noise_sigma > 0.0).then(|| Normal::new(0.0, self.noise_sigma as f64).unwrap());
        let n_chars = text.chars().count();
        let mut data = Vec::with_capacity(n_chars * self.frame_rate * d);
        for c in text.chars() {
            let p = self.prototypes.get(&c).ok_or_else(|| Error::Config(format!("domain {}: no prototype for {c:?}", self.id)))?;
            for _ in 0..self.frame_rate {
                for j in 0..d {
                    let e = noise.as_ref().map_or(0.0, |n| n.sample(rng) as f32);
                    data.push(p[j] + self.shift[j] + speaker[j] + e);
                }
            }
        }
        Ok(FeatureSeq::new(n_chars * self.frame_rate, d, data))
    }

    /// Nearest-prototype decoding with knowledge of the domain: removes the
    /// shift, averages each character's frames and picks the closest
    /// prototype.
    pub fn oracle_decode(&self, f: &FeatureSeq) -> String {
        let d = self.dim();
        let mut out = String::new();
        for chunk in f.data.chunks(d * self.frame_rate) {
            let frames = chunk.len() / d;
            let mean: Vec<f32> = (0..d)
                .map(|j| (0..frames).map(|r| chunk[r * d + j]).sum::<f32>() / frames as f32 - self.shift[j])
                .collect();
            let best = self
                .prototypes
                .iter()
                .map(|(c, p)| (c, p.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f32>()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(c, _)| *c)
                .unwrap();
            out.push(best);
        }
        out
    }
}

/// Character substitution followed by optional word-order reversal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Translation {
    pub substitution: BTreeMap<char, char>,
    pub reverse_words: bool,
}

impl Translation {
    pub fn identity() -> Self {
        Translation { substitution: BTreeMap::new(), reverse_words: false }
    }

    pub fn apply(&self, text: &str) -> String {
        let sub: String = text.chars().map(|c| *self.substitution.get(&c).unwrap_or(&c)).collect();
        if self.reverse_words {
            sub.split(' ').rev().collect::<Vec<_>>().join(" ")
        } else {
            sub
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Asr,
    St,
    Sqa,
}

/// Utterance distribution and target function of one synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTaskSpec {
    pub task: TaskId,
    pub kind: TaskKind,
    pub lexicon: Vec<String>,
    /// Inclusive range of words per utterance.
    pub words: (usize, usize),
    /// Zipf exponent of word frequencies (by lexicon rank).
    pub zipf: f64,
    /// Required for `St`.
    pub translation: Option<Translation>,
}

/// How generated samples are divided into query set and pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSpec {
    /// Leading fraction becomes the query set.
    Fraction(f64),
    Counts { query: usize, pool: usize },
    LeaveOneOut,
}

const SQA_WORDS: [&str; 4] = ["one word", "two words", "three words", "four words"];
const SQA_COUNTS: [&str; 4] = ["no", "one", "two", "many"];

impl SynthTaskSpec {
    fn utterance<R: Rng + ?Sized>(&self, weights: &rand::distr::weighted::WeightedIndex<f64>, rng: &mut R) -> String {
        let n = rng.random_range(self.words.0..=self.words.1);
        (0..n).map(|_| self.lexicon[weights.sample(rng)].as_str()).collect::<Vec<_>>().join(" ")
    }

    /// Multiple-choice question about `text`: choices, gold index, group tag.
    fn question<R: Rng + ?Sized>(&self, text: &str, alphabet: &[char], rng: &mut R) -> (Vec<String>, usize, &'static str) {
        let n_words = text.split(' ').count();
        match rng.random_range(0..3) {
            0 => {
                let m = alphabet[rng.random_range(0..alphabet.len())];
                let count = text.chars().filter(|&c| c == m).count().min(3);
                (SQA_COUNTS.iter().map(|w| format!("{w} {m}")).collect(), count, "count")
            }
            1 => {
                let first = text.chars().next().unwrap();
                let mut opts = vec![first];
                let mut others: Vec<char> = alphabet.iter().copied().filter(|&c| c != first).collect();
                others.shuffle(rng);
                opts.extend(others.into_iter().take(3));
                (opts.iter().map(|c| format!("starts {c}")).collect(), 0, "first")
            }
            _ => (SQA_WORDS.iter().map(|s| s.to_string()).collect(), (n_words - 1).min(3), "words"),
        }
    }

    fn sample(&self, i: usize, domain: &DomainSpec, alphabet: &[char], weights: &rand::distr::weighted::WeightedIndex<f64>, seed: u64) -> Result<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let text = self.utterance(weights, &mut rng);
        let feats = domain.render(&text, &mut rng)?;
        let n_words = text.split(' ').count();
        let mut tags = BTreeMap::new();
        tags.insert("words".to_string(), n_words.to_string());
        let (target, choices, key) = match self.kind {
            TaskKind::Asr => (text.clone(), None, None),
            TaskKind::St => {
                let tr = self.translation.as_ref().ok_or_else(|| Error::Config(format!("task {} lacks a translation", self.task)))?;
                (tr.apply(&text), None, None)
            }
            TaskKind::Sqa => {
                let (opts, gold, group) = self.question(&text, alphabet, &mut rng);
                let mut order: Vec<usize> = (0..opts.len()).collect();
                order.shuffle(&mut rng);
                let label = order.iter().position(|&o| o == gold).unwrap();
                tags.insert("group".into(), group.into());
                let difficulty = match n_words {
                    1 => "easy",
                    2 => "medium",
                    _ => "hard",
                };
                tags.insert("difficulty".into(), difficulty.into());
                let choices = order.iter().map(|&o| opts[o].clone()).collect();
                (crate::metrics::CHOICE_LABELS[label].to_string(), Some(choices), Some(text.clone()))
            }
        };
        Ok(Sample {
            id: format!("{}-{i:06}", self.task),
            task: self.task.clone(),
            input: SampleInput::Features(feats),
            target,
            choices,
            tags,
            retrieval_key: key,
        })
    }
}

/// Generates `n` samples of `spec` rendered in `domain`, split per `split`.
pub fn gen_dataset(spec: &SynthTaskSpec, domain: &DomainSpec, n: usize, seed: u64, split: SplitSpec) -> Result<TaskDataset> {
    if n < 2 {
        return Err(Error::Config(format!("task {}: need at least 2 samples", spec.task)));
    }
    if spec.lexicon.is_empty() || spec.words.0 == 0 || spec.words.0 > spec.words.1 {
        return Err(Error::Config(format!("task {}: bad lexicon or word range", spec.task)));
    }
    domain.validate()?;
    let weights = rand::distr::weighted::WeightedIndex::new((1..=spec.lexicon.len()).map(|r| (r as f64).powf(-spec.zipf)))
        .map_err(|e| Error::Config(e.to_string()))?;
    let alphabet: Vec<char> = domain.prototypes.keys().copied().filter(|&c| c != ' ').collect();
    if spec.kind == TaskKind::Sqa && alphabet.len() < 4 {
        return Err(Error::Config(format!("task {}: questions need at least 4 letters", spec.task)));
    }
    let samples = (0..n)
        .into_par_iter()
        .map(|i| spec.sample(i, domain, &alphabet, &weights, seed))
        .collect::<Result<Vec<_>>>()?;
    match split {
        SplitSpec::LeaveOneOut => TaskDataset::leave_one_out(spec.task.clone(), samples),
        SplitSpec::Fraction(f) => {
            let nq = ((n as f64 * f).round() as usize).clamp(1, n - 1);
            let mut q = samples;
            let p = q.split_off(nq);
            TaskDataset::split(spec.task.clone(), q, p)
        }
        SplitSpec::Counts { query, pool } => {
            if query + pool != n || pool == 0 {
                return Err(Error::Config(format!("task {}: split {query}+{pool} != {n}", spec.task)));
            }
            let mut q = samples;
            let p = q.split_off(query);
            TaskDataset::split(spec.task.clone(), q, p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn domain(sigma: f32) -> DomainSpec {
        let prototypes = [('a', vec![1.0, 0.0, 0.0]), ('b', vec![0.0, 1.0, 0.0]), (' ', vec![0.0, 0.0, 1.0])].into();
        DomainSpec { id: "d".into(), prototypes, shift: vec![0.5, -0.5, 0.0], noise_sigma: sigma, speaker_sigma: 0.0, frame_rate: 2 }
    }

    #[test]
    fn noise_free_rendering() {
        let f = domain(0.0).render("ab", &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(f.rows, 4);
        assert_eq!(f.row(0), &[1.5, -0.5, 0.0]);
        assert_eq!(f.row(1), &[1.5, -0.5, 0.0]);
        assert_eq!(f.row(3), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn oracle_decodes_noise_free_input() {
        let d = domain(0.0);
        let f = d.render("ab ba", &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(d.oracle_decode(&f), "ab ba");
    }

    #[test]
    fn validation_rejects_close_prototypes() {
        let mut d = domain(0.1);
        assert!(d.validate().is_ok());
        d.prototypes.insert('c', vec![1.0, 0.1, 0.0]);
        assert!(d.validate().is_err());
    }

    #[test]
    fn translation_substitutes_then_reverses() {
        let t = Translation { substitution: [('a', 'x')].into(), reverse_words: true };
        assert_eq!(t.apply("ab ba"), "bx xb");
    }

    fn wide_domain() -> DomainSpec {
        let prototypes = "abcd ".chars().enumerate().map(|(i, c)| (c, (0..5).map(|j| (i == j) as u8 as f32).collect())).collect();
        DomainSpec { id: "w".into(), prototypes, shift: vec![0.0; 5], noise_sigma: 0.2, speaker_sigma: 0.1, frame_rate: 2 }
    }

    #[test]
    fn generation_is_deterministic_and_split() {
        let spec = SynthTaskSpec {
            task: "t".into(),
            kind: TaskKind::Sqa,
            lexicon: vec!["ab".into(), "ba".into(), "aab".into()],
            words: (1, 3),
            zipf: 1.0,
            translation: None,
        };
        assert!(gen_dataset(&spec, &domain(0.2), 40, 9, SplitSpec::LeaveOneOut).is_err());
        let a = gen_dataset(&spec, &wide_domain(), 40, 9, SplitSpec::Counts { query: 10, pool: 30 }).unwrap();
        let b = gen_dataset(&spec, &wide_domain(), 40, 9, SplitSpec::Counts { query: 10, pool: 30 }).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.query_set.len(), a.demo_pool.len()), (10, 30));
        for s in &a.query_set {
            s.validate().unwrap();
            assert_eq!(s.choices.as_ref().unwrap().len(), 4);
        }
        let l = gen_dataset(&spec, &wide_domain(), 5, 1, SplitSpec::LeaveOneOut).unwrap();
        assert!(l.leave_one_out);
    }
}
