use std::collections::BTreeMap;

use proptest::prelude::*;
use siclat::metrics::{
    breakdown, capped_utterance_wer, corpus_bleu, edit_distance, extract_choice, mean_utterance_rate, pooled_rate, utterance_wer,
    BleuConfig, Normalizer, ScoredItem,
};

/// Full-matrix Levenshtein distance.
fn oracle_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

fn word_seq() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "dd", "e"]).prop_map(String::from), 0..12)
}

proptest! {
    #[test]
    fn edit_distance_matches_oracle(a in word_seq(), b in word_seq()) {
        prop_assert_eq!(edit_distance(&a, &b), oracle_distance(&a, &b));
    }

    #[test]
    fn char_edit_distance_matches_oracle(a in "[abc]{0,15}", b in "[abc]{0,15}") {
        let (x, y): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
        prop_assert_eq!(edit_distance(&x, &y), oracle_distance(&x, &y));
    }

    #[test]
    fn capped_wer_lies_in_unit_interval(h in word_seq(), r in prop::collection::vec("[a-e]{1,3}", 1..8)) {
        let hyp = h.join(" ");
        let reference = r.join(" ");
        let w = capped_utterance_wer(&hyp, &reference, &Normalizer::default()).unwrap();
        prop_assert!((0.0..=1.0).contains(&w));
        let raw = utterance_wer(&hyp, &reference, &Normalizer::default(), false).unwrap();
        prop_assert_eq!(w, raw.rate.min(1.0));
    }

    #[test]
    fn corpus_bleu_ignores_segment_order(
        segs in prop::collection::vec((word_seq(), prop::collection::vec("[a-e]", 1..8)), 1..6),
        rot in 0usize..6,
    ) {
        let pairs: Vec<(String, Vec<String>)> = segs.iter().map(|(h, r)| (h.join(" "), vec![r.join(" ")])).collect();
        let mut rotated = pairs.clone();
        rotated.rotate_left(rot % pairs.len());
        let cfg = BleuConfig::default();
        prop_assert_eq!(corpus_bleu(&pairs, &cfg), corpus_bleu(&rotated, &cfg));
        let b = corpus_bleu(&pairs, &cfg);
        prop_assert!((0.0..=1.0).contains(&b));
    }

    #[test]
    fn breakdown_conserves_counts_and_mass(
        items in prop::collection::vec((0u8..4, 0u8..3, prop::bool::ANY, 0.0f64..1.0), 1..60),
        binary in prop::bool::ANY,
    ) {
        let scored: Vec<ScoredItem> = items
            .iter()
            .enumerate()
            .map(|(i, &(g, h, has_h, s))| {
                let mut tags = BTreeMap::from([("g".to_string(), format!("g{g}"))]);
                if has_h {
                    tags.insert("h".into(), format!("h{h}"));
                }
                let score = if binary { f64::from(u8::from(s > 0.5)) } else { s };
                ScoredItem { id: format!("i{i}"), task: "t".into(), hypothesis: String::new(), reference: String::new(), score, tags }
            })
            .collect();
        let t = breakdown(&scored, &["g", "h"]).unwrap();
        for key in ["g", "h"] {
            let rows: Vec<_> = t.rows.iter().filter(|r| r.group == key).collect();
            prop_assert_eq!(rows.iter().map(|r| r.n).sum::<usize>(), scored.len());
            let mass: f64 = rows.iter().map(|r| r.total).sum();
            prop_assert!((mass - t.overall.total).abs() < 1e-9);
        }
    }
}

#[test]
fn capped_wer_of_a_long_hallucination_is_one() {
    assert_eq!(capped_utterance_wer("x y z", "a b", &Normalizer::default()), Some(1.0));
}

#[test]
fn mean_of_capped_differs_from_pooled() {
    let n = Normalizer::default();
    // utterance 1: 1 of 1 wrong; utterance 2: 0 of 3 wrong
    let errs = [utterance_wer("x", "a", &n, true), utterance_wer("b c d", "b c d", &n, true)];
    assert_eq!(mean_utterance_rate(&errs).0, 0.5);
    assert_eq!(pooled_rate(&errs), 0.25);
}

#[test]
fn group_sizes_and_rates_reproduce_total_accuracy() {
    let groups = [("g1", 333usize, 0.7177), ("g2", 334, 0.6527), ("g3", 333, 0.6366)];
    let mut items = Vec::new();
    for (g, n, rate) in groups {
        let correct = (rate * n as f64).round() as usize;
        for i in 0..n {
            let tags = BTreeMap::from([("group".to_string(), g.to_string())]);
            let score = if i < correct { 1.0 } else { 0.0 };
            items.push(ScoredItem { id: format!("{g}-{i}"), task: "qa".into(), hypothesis: String::new(), reference: String::new(), score, tags });
        }
    }
    let t = breakdown(&items, &["group"]).unwrap();
    assert_eq!(t.overall.n, 1000);
    assert_eq!(t.overall.total, 669.0);
    assert_eq!(format!("{:.2}", 100.0 * t.overall.score), "66.90");
    let per_group: Vec<String> = t.rows.iter().map(|r| format!("{:.2}", 100.0 * r.score)).collect();
    assert_eq!(per_group, ["71.77", "65.27", "63.66"]);
}

#[test]
fn choice_extraction_finds_first_standalone_label() {
    assert_eq!(extract_choice("The answer is B.", 4), Some('B'));
    assert_eq!(extract_choice("(C) because", 4), Some('C'));
    assert_eq!(extract_choice("BAD", 4), None);
    assert_eq!(extract_choice("E then A", 4), Some('A'));
}
