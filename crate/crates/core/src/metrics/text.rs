use serde::{Deserialize, Serialize};

use super::edit::edit_distance;

/// Text normalization applied before WER / CER scoring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Normalizer {
    pub lowercase: bool,
    /// Drop punctuation except apostrophes.
    pub strip_punctuation: bool,
    /// Remove whitespace entirely (character-based languages).
    pub remove_whitespace: bool,
}

impl Default for Normalizer {
    fn default() -> Self {
        Normalizer { lowercase: true, strip_punctuation: true, remove_whitespace: false }
    }
}

impl Normalizer {
    pub fn for_characters() -> Self {
        Normalizer { remove_whitespace: true, ..Normalizer::default() }
    }

    pub fn apply(&self, s: &str) -> String {
        let mut out = String::with_capacity(s.len());
        let mut pending_space = false;
        for c in s.chars() {
            let punct = (c.is_ascii_punctuation() || is_unicode_punct(c)) && c != '\'';
            if c.is_whitespace() || (self.strip_punctuation && punct) {
                pending_space = true;
                continue;
            }
            if pending_space && !out.is_empty() && !self.remove_whitespace {
                out.push(' ');
            }
            pending_space = false;
            if self.lowercase {
                out.extend(c.to_lowercase());
            } else {
                out.push(c);
            }
        }
        out
    }
}

fn is_unicode_punct(c: char) -> bool {
    matches!(c, '，' | '。' | '！' | '？' | '、' | '；' | '：' | '“' | '”' | '‘' | '’' | '«' | '»' | '…' | '—' | '–')
}

/// Per-utterance error rate with its raw counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtteranceError {
    pub edits: usize,
    pub ref_len: usize,
    /// `min(cap, edits / ref_len)` or the raw ratio when uncapped.
    pub rate: f64,
}

fn rate(edits: usize, ref_len: usize, capped: bool) -> f64 {
    let raw = edits as f64 / ref_len as f64;
    if capped {
        raw.min(1.0)
    } else {
        raw
    }
}

/// Word error rate of one utterance, `min(1, edits / |ref words|)` when
/// `capped`. `None` when the normalized reference is empty; such
/// utterances are excluded from averages.
pub fn utterance_wer(hyp: &str, reference: &str, norm: &Normalizer, capped: bool) -> Option<UtteranceError> {
    let r = norm.apply(reference);
    let h = norm.apply(hyp);
    let rw: Vec<&str> = r.split_whitespace().collect();
    if rw.is_empty() {
        return None;
    }
    let hw: Vec<&str> = h.split_whitespace().collect();
    let edits = edit_distance(&hw, &rw);
    Some(UtteranceError { edits, ref_len: rw.len(), rate: rate(edits, rw.len(), capped) })
}

/// Capped utterance WER with the default normalizer.
pub fn capped_utterance_wer(hyp: &str, reference: &str, norm: &Normalizer) -> Option<f64> {
    utterance_wer(hyp, reference, norm, true).map(|e| e.rate)
}

/// Character error rate of one utterance.
pub fn cer(hyp: &str, reference: &str, norm: &Normalizer, capped: bool) -> Option<UtteranceError> {
    let r: Vec<char> = norm.apply(reference).chars().collect();
    if r.is_empty() {
        return None;
    }
    let h: Vec<char> = norm.apply(hyp).chars().collect();
    let edits = edit_distance(&h, &r);
    Some(UtteranceError { edits, ref_len: r.len(), rate: rate(edits, r.len(), capped) })
}

/// Mean of per-utterance rates; utterances with empty references are
/// skipped and counted in the second return value.
pub fn mean_utterance_rate(errors: &[Option<UtteranceError>]) -> (f64, usize) {
    let kept: Vec<f64> = errors.iter().flatten().map(|e| e.rate).collect();
    let skipped = errors.len() - kept.len();
    if kept.is_empty() {
        return (0.0, skipped);
    }
    (kept.iter().sum::<f64>() / kept.len() as f64, skipped)
}

/// Pooled corpus rate `Σ edits / Σ ref_len`, for contrast with the mean of
/// capped utterance rates.
pub fn pooled_rate(errors: &[Option<UtteranceError>]) -> f64 {
    let (e, n) = errors.iter().flatten().fold((0usize, 0usize), |(e, n), u| (e + u.edits, n + u.ref_len));
    if n == 0 {
        0.0
    } else {
        e as f64 / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizer_defaults() {
        let n = Normalizer::default();
        assert_eq!(n.apply("  Hello,  World! It's   ok. "), "hello world it's ok");
        assert_eq!(Normalizer::for_characters().apply("你 好，世界"), "你好世界");
    }

    #[test]
    fn wer_cases() {
        let n = Normalizer::default();
        assert_eq!(capped_utterance_wer("a b", "a b", &n), Some(0.0));
        assert_eq!(capped_utterance_wer("x y z", "a b", &n), Some(1.0));
        assert_eq!(utterance_wer("x y z", "a b", &n, false).unwrap().rate, 1.5);
        assert_eq!(capped_utterance_wer("anything", " ,. ", &n), None);
        assert_eq!(capped_utterance_wer("A, B!", "a b", &n), Some(0.0));
    }

    #[test]
    fn cer_cases() {
        let n = Normalizer::default();
        assert_eq!(cer("abed", "abcd", &n, true).unwrap().rate, 0.25);
        assert_eq!(cer("abcd", "abcd", &n, true).unwrap().rate, 0.0);
        // whitespace counts as a character unless the normalizer removes it
        assert_eq!(cer("ab cd", "abcd", &n, true).unwrap().edits, 1);
        assert_eq!(cer("ab cd", "abcd", &Normalizer::for_characters(), true).unwrap().edits, 0);
    }

    #[test]
    fn mean_of_capped_differs_from_pooled() {
        let n = Normalizer::default();
        let errs = vec![utterance_wer("a b c d e f", "a", &n, true), utterance_wer("a b c d", "a b c d", &n, true)];
        let (mean, skipped) = mean_utterance_rate(&errs);
        assert_eq!(skipped, 0);
        assert_eq!(mean, 0.5);
        assert_eq!(pooled_rate(&errs), 1.0);
    }
}
