use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{gen_dataset, DomainSpec, SplitSpec, SynthTaskSpec, TaskKind, Translation};
use crate::corpus::{TaskDataset, TaskId};
use crate::error::{Error, Result};
use crate::retrieval::cosine;

/// Training-set sizes of the three mixture configurations, per task.
pub const TABLE1: [(&str, usize); 6] = [
    ("asr_en", 16_368),
    ("st_en_zh", 15_427),
    ("st_de_en", 13_500),
    ("st_zh_en", 4_842),
    ("st_pt_en", 3_318),
    ("sqa", 5_000),
];

/// Translation tasks: (task, source domain, target language).
pub const ST_TASKS: [(&str, &str, &str); 5] = [
    ("st_en_zh", "en", "zh"),
    ("st_de_en", "de", "en"),
    ("st_zh_en", "zh", "en"),
    ("st_pt_en", "pt", "en"),
    ("st_unseen", "de", "zh"),
];

/// Parameters of a synthetic world: alphabet, lexicon, domains and sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub seed: u64,
    pub n_chars: usize,
    pub feature_dim: usize,
    pub lexicon_size: usize,
    pub word_len: (usize, usize),
    pub words: (usize, usize),
    pub zipf: f64,
    pub frame_rate: usize,
    pub noise_sigma: f64,
    pub speaker_sigma: f64,
    /// Offset norm of the first shifted domain.
    pub shift_a: f64,
    /// Offset norm of the second shifted domain.
    pub shift_b: f64,
    /// Prototype pairs swapped in the second shifted domain.
    pub swaps_b: usize,
    /// Offset norm of the non-English source languages.
    pub lang_shift: f64,
    /// Prototype swaps of each source language; `None` shuffles fully.
    pub lang_swaps: Option<usize>,
    /// Multiplier on the training-set sizes of [`TABLE1`].
    pub scale: f64,
    pub asr_query_fraction: f64,
    pub eval_queries: usize,
    pub eval_pool: usize,
    pub sft_items: usize,
    pub reverse_words: bool,
    /// Number of randomly shifted domains used to pretrain the base model.
    pub pretrain_domains: usize,
    /// Maximum offset norm of a pretraining domain.
    pub pretrain_shift: f64,
    /// Upper bound of the prototype pairs swapped in a pretraining domain;
    /// each domain draws its count uniformly from `0..=pretrain_swaps`.
    pub pretrain_swaps: usize,
    pub pretrain_items: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            seed: 0,
            n_chars: 12,
            feature_dim: 16,
            lexicon_size: 120,
            word_len: (2, 4),
            words: (1, 3),
            zipf: 1.0,
            frame_rate: 2,
            noise_sigma: 0.3,
            speaker_sigma: 0.2,
            shift_a: 5.0,
            shift_b: 5.0,
            swaps_b: 2,
            lang_shift: 1.0,
            lang_swaps: Some(3),
            scale: 1.0,
            asr_query_fraction: 0.5,
            eval_queries: 300,
            eval_pool: 500,
            sft_items: 500,
            reverse_words: false,
            pretrain_domains: 4000,
            pretrain_shift: 6.0,
            pretrain_swaps: 6,
            pretrain_items: 12,
        }
    }
}

/// One dataset to generate.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPlan {
    pub spec: SynthTaskSpec,
    pub domain: String,
    pub n: usize,
    pub split: SplitSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    pub alphabet: Vec<char>,
    pub lexicon: Vec<String>,
    pub domains: BTreeMap<String, DomainSpec>,
    pub translations: BTreeMap<String, Translation>,
}

fn seed_for(seed: u64, name: &str) -> u64 {
    name.bytes().fold(seed ^ 0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

fn random_direction(dim: usize, norm: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n * norm) as f32).collect()
}

impl World {
    pub fn build(spec: &WorldSpec) -> Result<World> {
        if spec.n_chars < 4 || spec.n_chars > 26 {
            return Err(Error::Config(format!("n_chars {} outside 4..=26", spec.n_chars)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(spec.seed, "world"));
        let letters: Vec<char> = (b'a'..b'a' + spec.n_chars as u8).map(char::from).collect();
        let mut alphabet = letters.clone();
        alphabet.push(' ');

        let mut protos: Vec<Vec<f32>> = Vec::new();
        let mut tries = 0;
        while protos.len() < alphabet.len() {
            tries += 1;
            if tries > 100_000 {
                return Err(Error::Config("could not place well-separated prototypes".into()));
            }
            let v: Vec<f32> = (0..spec.feature_dim).map(|_| StandardNormal.sample(&mut rng)).map(|x: f64| x as f32).collect();
            let vf: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            if protos.iter().all(|p| cosine(&p.iter().map(|&x| x as f64).collect::<Vec<_>>(), &vf) < 0.6) {
                protos.push(v);
            }
        }
        let base: BTreeMap<char, Vec<f32>> = alphabet.iter().copied().zip(protos.iter().cloned()).collect();

        let mut lexicon = Vec::new();
        let mut tries = 0;
        while lexicon.len() < spec.lexicon_size {
            tries += 1;
            if tries > 1_000_000 {
                return Err(Error::Config("lexicon too large for alphabet".into()));
            }
            let len = rng.random_range(spec.word_len.0..=spec.word_len.1);
            let w: String = (0..len).map(|_| letters[rng.random_range(0..letters.len())]).collect();
            if !lexicon.contains(&w) {
                lexicon.push(w);
            }
        }

        let d = spec.feature_dim;
        let domain = |id: &str, prototypes: BTreeMap<char, Vec<f32>>, shift: Vec<f32>| DomainSpec {
            id: id.to_string(),
            prototypes,
            shift,
            noise_sigma: spec.noise_sigma as f32,
            speaker_sigma: spec.speaker_sigma as f32,
            frame_rate: spec.frame_rate,
        };
        let permuted = |rng: &mut ChaCha8Rng, swaps: Option<usize>| {
            let mut perm = letters.clone();
            match swaps {
                None => perm.shuffle(rng),
                Some(n) => {
                    let mut idx: Vec<usize> = (0..letters.len()).collect();
                    idx.shuffle(rng);
                    for pair in idx.chunks(2).take(n) {
                        perm.swap(pair[0], pair[1]);
                    }
                }
            }
            let mut m = base.clone();
            for (c, src) in letters.iter().zip(&perm) {
                m.insert(*c, base[src].clone());
            }
            m
        };

        let mut domains = BTreeMap::new();
        domains.insert("en".to_string(), domain("en", base.clone(), vec![0.0; d]));
        let s = random_direction(d, spec.shift_a, &mut rng);
        domains.insert("myst".to_string(), domain("myst", base.clone(), s));
        let p = permuted(&mut rng, Some(spec.swaps_b));
        let s = random_direction(d, spec.shift_b, &mut rng);
        domains.insert("rsr".to_string(), domain("rsr", p, s));
        for lang in ["de", "zh", "pt"] {
            let p = permuted(&mut rng, spec.lang_swaps);
            let s = random_direction(d, spec.lang_shift, &mut rng);
            domains.insert(lang.to_string(), domain(lang, p, s));
        }

        for i in 0..spec.pretrain_domains {
            let swaps = rng.random_range(0..=spec.pretrain_swaps);
            let p = permuted(&mut rng, Some(swaps));
            let norm = rng.random_range(0.0..=spec.pretrain_shift);
            let s = random_direction(d, norm, &mut rng);
            let id = format!("pre{i}");
            domains.insert(id.clone(), domain(&id, p, s));
        }

        let mut translations = BTreeMap::new();
        translations.insert("en".to_string(), Translation::identity());
        let mut perm = letters.clone();
        perm.shuffle(&mut rng);
        translations.insert(
            "zh".to_string(),
            Translation { substitution: letters.iter().copied().zip(perm).collect(), reverse_words: spec.reverse_words },
        );
        Ok(World { spec: spec.clone(), alphabet, lexicon, domains, translations })
    }

    fn scaled(&self, n: usize) -> usize {
        ((n as f64 * self.spec.scale).round() as usize).max(2)
    }

    /// Every dataset of the world: the training tasks sized after
    /// [`TABLE1`] and the evaluation suites.
    pub fn plans(&self) -> Vec<TaskPlan> {
        let sp = &self.spec;
        let task = |name: &str, kind: TaskKind, target_lang: Option<&str>| SynthTaskSpec {
            task: name.to_string(),
            kind,
            lexicon: self.lexicon.clone(),
            words: sp.words,
            zipf: sp.zipf,
            translation: target_lang.map(|l| self.translations[l].clone()),
        };
        let plan = |spec, domain: &str, n, split| TaskPlan { spec, domain: domain.to_string(), n, split };
        let size = |name: &str| self.scaled(TABLE1.iter().find(|(n, _)| *n == name).unwrap().1);
        let eval = SplitSpec::Counts { query: sp.eval_queries, pool: sp.eval_pool };
        let n_eval = sp.eval_queries + sp.eval_pool;
        let mut plans = vec![
            plan(task("asr_en", TaskKind::Asr, None), "en", size("asr_en"), SplitSpec::Fraction(sp.asr_query_fraction)),
            plan(task("sqa", TaskKind::Sqa, None), "en", size("sqa"), SplitSpec::LeaveOneOut),
            plan(task("myst", TaskKind::Asr, None), "myst", n_eval, eval),
            plan(task("rsr", TaskKind::Asr, None), "rsr", n_eval, eval),
            plan(task("rsr_train", TaskKind::Asr, None), "rsr", sp.sft_items.max(2), SplitSpec::LeaveOneOut),
            plan(task("sqa_test", TaskKind::Sqa, None), "en", n_eval, eval),
        ];
        for (name, src, lang) in ST_TASKS {
            let (n, split) = match TABLE1.iter().find(|(t, _)| *t == name) {
                Some(_) => (size(name), SplitSpec::Fraction(sp.asr_query_fraction)),
                None => (n_eval, eval),
            };
            plans.push(plan(task(name, TaskKind::St, Some(lang)), src, n, split));
        }
        for i in 0..sp.pretrain_domains {
            let name = format!("pre{i}");
            plans.push(plan(task(&name, TaskKind::Asr, None), &name, sp.pretrain_items.max(2), SplitSpec::Fraction(0.5)));
        }
        plans
    }

    /// Names of the pretraining tasks.
    pub fn pretrain_tasks(&self) -> Vec<String> {
        (0..self.spec.pretrain_domains).map(|i| format!("pre{i}")).collect()
    }

    pub fn generate(&self, plan: &TaskPlan) -> Result<TaskDataset> {
        let domain = self.domains.get(&plan.domain).ok_or_else(|| Error::Config(format!("unknown domain {}", plan.domain)))?;
        gen_dataset(&plan.spec, domain, plan.n, seed_for(self.spec.seed, &plan.spec.task), plan.split)
    }

    /// Generates the named tasks (all tasks when `only` is empty).
    pub fn generate_tasks(&self, only: &[&str]) -> Result<BTreeMap<TaskId, TaskDataset>> {
        let mut out = BTreeMap::new();
        for p in self.plans() {
            if only.is_empty() || only.contains(&p.spec.task.as_str()) {
                out.insert(p.spec.task.clone(), self.generate(&p)?);
            }
        }
        for name in only {
            if !out.contains_key(*name) {
                return Err(Error::UnknownTask(name.to_string()));
            }
        }
        Ok(out)
    }
}
