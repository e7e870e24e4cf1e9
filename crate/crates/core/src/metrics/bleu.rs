//! Corpus BLEU: brevity penalty times the geometric mean of modified
//! n-gram precisions, with counts pooled over all segments.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BleuConfig {
    pub max_n: usize,
    /// Replace zero match counts with this value. Off by default.
    pub smoothing_epsilon: Option<f64>,
    /// Count character n-grams instead of word n-grams, ignoring whitespace.
    pub chars: bool,
}

impl Default for BleuConfig {
    fn default() -> Self {
        BleuConfig { max_n: 4, smoothing_epsilon: None, chars: false }
    }
}

/// Sufficient statistics of one or more segments.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn merge(&mut self, other: &BleuStats) {
        if self.matches.is_empty() {
            self.matches = vec![0; other.matches.len()];
            self.totals = vec![0; other.totals.len()];
        }
        for n in 0..self.matches.len() {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    pub fn score(&self, cfg: &BleuConfig) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..cfg.max_n {
            let m = self.matches.get(n).copied().unwrap_or(0);
            let t = self.totals.get(n).copied().unwrap_or(0);
            let p = match (m, cfg.smoothing_epsilon) {
                (0, None) => return 0.0,
                (0, Some(eps)) => eps / t.max(1) as f64,
                (m, _) => m as f64 / t as f64,
            };
            log_sum += p.ln();
        }
        let bp = if self.hyp_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        bp * (log_sum / cfg.max_n as f64).exp()
    }
}

fn ngram_counts<'t, 'a>(tokens: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Statistics of a single segment against one or more references. The
/// effective reference length is the one closest to the hypothesis length
/// (shorter wins ties).
pub fn segment_stats(hyp: &str, refs: &[&str], max_n: usize) -> BleuStats {
    let h: Vec<&str> = hyp.split_whitespace().collect();
    let rs: Vec<Vec<&str>> = refs.iter().map(|r| r.split_whitespace().collect()).collect();
    token_stats(&h, &rs, max_n)
}

fn char_tokens(s: &str) -> Vec<&str> {
    s.char_indices().filter(|(_, c)| !c.is_whitespace()).map(|(i, c)| &s[i..i + c.len_utf8()]).collect()
}

/// Like [`segment_stats`], tokenizing as `cfg` asks.
pub fn segment_stats_with(hyp: &str, refs: &[&str], cfg: &BleuConfig) -> BleuStats {
    if !cfg.chars {
        return segment_stats(hyp, refs, cfg.max_n);
    }
    let rs: Vec<Vec<&str>> = refs.iter().map(|r| char_tokens(r)).collect();
    token_stats(&char_tokens(hyp), &rs, cfg.max_n)
}

fn token_stats(h: &[&str], rs: &[Vec<&str>], max_n: usize) -> BleuStats {
    let mut matches = vec![0; max_n];
    let mut totals = vec![0; max_n];
    for n in 1..=max_n {
        let hc = ngram_counts(h, n);
        let mut max_ref: HashMap<&[&str], usize> = HashMap::new();
        for r in rs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        for (g, c) in &hc {
            matches[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
            totals[n - 1] += c;
        }
    }
    let ref_len = rs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(h.len()), l))
        .unwrap_or(0);
    BleuStats { matches, totals, hyp_len: h.len(), ref_len }
}

/// Corpus BLEU over `(hypothesis, references)` pairs, in `[0, 1]`.
pub fn corpus_bleu<S: AsRef<str>>(pairs: &[(S, Vec<S>)], cfg: &BleuConfig) -> f64 {
    let mut total = BleuStats { matches: vec![0; cfg.max_n], totals: vec![0; cfg.max_n], ..Default::default() };
    for (h, refs) in pairs {
        let r: Vec<&str> = refs.iter().map(|s| s.as_ref()).collect();
        total.merge(&segment_stats_with(h.as_ref(), &r, cfg));
    }
    total.score(cfg)
}

/// BLEU of a single segment.
pub fn bleu(hyp: &str, refs: &[&str], max_n: usize) -> f64 {
    segment_stats(hyp, refs, max_n).score(&BleuConfig { max_n, ..BleuConfig::default() })
}

/// Single-segment BLEU under `cfg`.
pub fn bleu_with(hyp: &str, refs: &[&str], cfg: &BleuConfig) -> f64 {
    segment_stats_with(hyp, refs, cfg).score(cfg)
}
