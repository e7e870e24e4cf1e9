//! Zero-shot and few-shot evaluation of a model on benchmark suites.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{TaskDataset, TaskId};
use crate::episodes::{make_eval_prompt, order_demos, DemoOrder, PoolRetriever, PromptTemplate};
use crate::error::{Error, Result};
use crate::metrics::{
    bleu_with, breakdown, cer, corpus_bleu, mean_utterance_rate, pooled_rate, qa_correct, utterance_wer, BleuConfig,
    BreakdownTable, Normalizer, ScoredItem,
};
use crate::model::{generate, ModelParams};
use crate::synthbench::{SuiteKind, SuiteSpec};
use crate::tokenizer::ByteTokenizer;

impl SuiteKind {
    pub fn higher_is_better(self) -> bool {
        matches!(self, SuiteKind::St | SuiteKind::Sqa)
    }

    pub fn metric_name(self) -> &'static str {
        match self {
            SuiteKind::Asr => "capped_wer",
            SuiteKind::AsrChar => "capped_cer",
            SuiteKind::St => "bleu",
            SuiteKind::Sqa => "accuracy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub k: usize,
    pub max_new_tokens: usize,
    pub max_seq_len: usize,
    pub template: PromptTemplate,
    /// Per-task templates that override `template`.
    #[serde(default)]
    pub task_templates: BTreeMap<TaskId, PromptTemplate>,
    pub embed_dim: usize,
    pub bleu: BleuConfig,
    pub normalizer: Normalizer,
}

impl EvalOptions {
    pub fn template_for(&self, task: &str) -> &PromptTemplate {
        self.task_templates.get(task).unwrap_or(&self.template)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub suite: String,
    pub task: String,
    pub kind: SuiteKind,
    pub shots: usize,
    pub metric: String,
    /// Headline score in `[0, 1]`.
    pub score: f64,
    /// Mean of uncapped utterance rates (ASR kinds only).
    pub uncapped: Option<f64>,
    /// `Σ edits / Σ ref_len` (ASR kinds only).
    pub pooled: Option<f64>,
    pub n: usize,
    pub items: Vec<ScoredItem>,
    pub breakdown: BreakdownTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub shots: usize,
    pub suites: Vec<SuiteResult>,
}

/// Rows are inference settings (zero-shot, few-shot), columns are suites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub rows: Vec<ReportRow>,
}

/// Report row label for a shot count.
pub fn row_label(shots: usize) -> String {
    if shots == 0 {
        "zero-shot".into()
    } else {
        format!("few-shot k={shots}")
    }
}

impl MetricReport {
    pub fn cell(&self, row: &str, suite: &str) -> Option<&SuiteResult> {
        self.rows.iter().find(|r| r.label == row)?.suites.iter().find(|s| s.suite == suite)
    }

    pub fn suite_names(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in self.rows.iter().flat_map(|r| &r.suites) {
            if !out.contains(&s.suite) {
                out.push(s.suite.clone());
            }
        }
        out
    }

    /// Aligned summary table with scores as percentages.
    pub fn render(&self) -> String {
        let suites = self.suite_names();
        let heads: Vec<String> = suites
            .iter()
            .map(|n| {
                let kind = self.rows.iter().flat_map(|r| &r.suites).find(|s| &s.suite == n).unwrap();
                format!("{n} ({})", kind.metric)
            })
            .collect();
        let lw = self.rows.iter().map(|r| r.label.len()).chain([self.model.len()]).max().unwrap_or(0);
        let mut s = String::new();
        let _ = write!(s, "{:<lw$}", self.model);
        for h in &heads {
            let _ = write!(s, "  {:>w$}", h, w = h.len().max(8));
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<lw$}", r.label);
            for (n, h) in suites.iter().zip(&heads) {
                let w = h.len().max(8);
                match r.suites.iter().find(|x| &x.suite == n) {
                    Some(x) => {
                        let _ = write!(s, "  {:>w$.2}", 100.0 * x.score);
                    }
                    None => {
                        let _ = write!(s, "  {:>w$}", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }

    /// Summary plus one breakdown table per cell.
    pub fn render_full(&self) -> String {
        let mut s = self.render();
        for r in &self.rows {
            for x in &r.suites {
                s.push('\n');
                s.push_str(&x.breakdown.render(&format!("{} / {} ({})", x.suite, r.label, x.metric)));
                if let (Some(u), Some(p)) = (x.uncapped, x.pooled) {
                    let _ = writeln!(s, "uncapped mean {:.2}%  pooled {:.2}%", 100.0 * u, 100.0 * p);
                }
            }
        }
        s
    }
}

/// Hypotheses for each query of `ds` (first `limit` queries) with `shots`
/// retrieved demonstrations. The retrieval key of a query is its
/// `retrieval_key` if set, else `pseudo[i]` (typically the zero-shot
/// hypothesis). An empty key falls back to the first pool items.
pub fn generate_suite(
    params: &ModelParams,
    ds: &TaskDataset,
    retriever: &PoolRetriever,
    opts: &EvalOptions,
    shots: usize,
    limit: usize,
    pseudo: Option<&[String]>,
) -> Result<Vec<String>> {
    let budget = opts.max_seq_len.saturating_sub(opts.max_new_tokens);
    let tok = ByteTokenizer;
    ds.query_set[..limit]
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let demos = if shots == 0 {
                Vec::new()
            } else {
                let key = match (&q.retrieval_key, pseudo) {
                    (Some(k), _) => k.clone(),
                    (None, Some(p)) => p[i].clone(),
                    (None, None) => String::new(),
                };
                let demos = if key.trim().is_empty() {
                    first_pool_demos(ds, q, shots)
                } else {
                    let v = retriever.embed(&q.id, &key)?;
                    retriever.retrieve(q, &v, shots)?
                };
                order_demos(demos, DemoOrder::SimilarLast, &mut ChaCha8Rng::seed_from_u64(0))
            };
            let prompt = make_eval_prompt(&demos, q, opts.template_for(&ds.task), budget)?;
            let g = generate(params, &prompt.input, opts.max_new_tokens)?;
            Ok(tok.decode(&g.tokens))
        })
        .collect()
}

fn first_pool_demos(ds: &TaskDataset, q: &crate::corpus::Sample, k: usize) -> Vec<crate::episodes::Demo> {
    ds.demo_pool
        .iter()
        .filter(|s| s.id != q.id)
        .take(k)
        .map(|s| crate::episodes::Demo { sample: s.clone(), score: 0.0 })
        .collect()
}

/// Scores hypotheses against the first `hyps.len()` queries of `ds`.
pub fn score_suite(suite: &SuiteSpec, ds: &TaskDataset, hyps: &[String], shots: usize, opts: &EvalOptions) -> Result<SuiteResult> {
    let queries = &ds.query_set[..hyps.len()];
    let mut items: Vec<ScoredItem> = queries
        .iter()
        .zip(hyps)
        .map(|(q, h)| ScoredItem {
            id: q.id.clone(),
            task: q.task.clone(),
            hypothesis: h.clone(),
            reference: q.target.clone(),
            score: 0.0,
            tags: q.tags.clone(),
        })
        .collect();
    let (mut uncapped, mut pooled) = (None, None);
    let score = match suite.kind {
        SuiteKind::Asr | SuiteKind::AsrChar => {
            let (norm, f): (Normalizer, fn(&str, &str, &Normalizer, bool) -> _) = match suite.kind {
                SuiteKind::Asr => (opts.normalizer.clone(), utterance_wer),
                _ => (Normalizer::for_characters(), cer),
            };
            let capped: Vec<_> = items.iter().map(|it| f(&it.hypothesis, &it.reference, &norm, true)).collect();
            let raw: Vec<_> = items.iter().map(|it| f(&it.hypothesis, &it.reference, &norm, false)).collect();
            items = items.into_iter().zip(&capped).filter_map(|(mut it, e)| e.map(|e| { it.score = e.rate; it })).collect();
            uncapped = Some(mean_utterance_rate(&raw).0);
            pooled = Some(pooled_rate(&raw));
            mean_utterance_rate(&capped).0
        }
        SuiteKind::St => {
            for it in &mut items {
                it.score = bleu_with(&it.hypothesis, &[&it.reference], &opts.bleu);
            }
            let pairs: Vec<(&str, Vec<&str>)> = items.iter().map(|it| (it.hypothesis.as_str(), vec![it.reference.as_str()])).collect();
            corpus_bleu(&pairs, &opts.bleu)
        }
        SuiteKind::Sqa => {
            for (it, q) in items.iter_mut().zip(queries) {
                let gold = q.gold_label().ok_or_else(|| Error::InvalidSample { id: q.id.clone(), msg: "no gold label".into() })?;
                let n = q.choices.as_ref().map_or(0, Vec::len);
                it.score = if qa_correct(&it.hypothesis, gold, n) { 1.0 } else { 0.0 };
            }
            items.iter().map(|i| i.score).sum::<f64>() / items.len().max(1) as f64
        }
    };
    let keys: BTreeSet<&str> = items.iter().flat_map(|i| i.tags.keys().map(String::as_str)).collect();
    let keys: Vec<&str> = keys.into_iter().collect();
    let table = breakdown(&items, &keys)?;
    Ok(SuiteResult {
        suite: suite.name.clone(),
        task: suite.task.clone(),
        kind: suite.kind,
        shots,
        metric: suite.kind.metric_name().into(),
        score,
        uncapped,
        pooled,
        n: items.len(),
        items,
        breakdown: table,
    })
}

/// Evaluates every suite zero-shot and, when `opts.k > 0`, few-shot.
pub fn evaluate(
    params: &ModelParams,
    model_label: &str,
    suites: &[SuiteSpec],
    datasets: &BTreeMap<TaskId, Arc<TaskDataset>>,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let mut zero = ReportRow { label: row_label(0), shots: 0, suites: Vec::new() };
    let mut few = ReportRow { label: row_label(opts.k), shots: opts.k, suites: Vec::new() };
    for suite in suites {
        let ds = datasets.get(&suite.task).ok_or_else(|| Error::UnknownTask(suite.task.clone()))?;
        let limit = suite.max_items.unwrap_or(usize::MAX).min(ds.query_set.len());
        let retriever = PoolRetriever::build(ds, opts.embed_dim, None)?;
        let z = generate_suite(params, ds, &retriever, opts, 0, limit, None)?;
        if opts.k > 0 {
            let f = generate_suite(params, ds, &retriever, opts, opts.k, limit, Some(&z))?;
            few.suites.push(score_suite(suite, ds, &f, opts.k, opts)?);
        }
        zero.suites.push(score_suite(suite, ds, &z, 0, opts)?);
    }
    let mut rows = vec![zero];
    if opts.k > 0 {
        rows.push(few);
    }
    Ok(MetricReport { model: model_label.into(), rows })
}
