use std::sync::OnceLock;

use regex::Regex;

/// Choice labels in presentation order.
pub const CHOICE_LABELS: [char; 8] = ['A', 'B', 'C', 'D', 'E', 'F', 'G', 'H'];

fn label_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:^|[^A-Za-z0-9])([A-H])(?:[^A-Za-z0-9]|$)").unwrap())
}

/// First standalone choice label in `generation`, restricted to the first
/// `n_choices` labels.
pub fn extract_choice(generation: &str, n_choices: usize) -> Option<char> {
    let allowed = &CHOICE_LABELS[..n_choices.min(CHOICE_LABELS.len())];
    // regex matches can overlap on the separator, so scan by position
    let mut start = 0;
    while start <= generation.len() {
        let caps = label_regex().captures(&generation[start..])?;
        let m = caps.get(1).unwrap();
        let c = m.as_str().chars().next().unwrap();
        if allowed.contains(&c) {
            return Some(c);
        }
        start += m.end();
    }
    None
}

/// Exact match of the extracted label against the gold label.
pub fn qa_correct(generation: &str, gold: char, n_choices: usize) -> bool {
    extract_choice(generation, n_choices) == Some(gold)
}

/// Fraction of correct items.
pub fn qa_accuracy(correct: &[bool]) -> f64 {
    if correct.is_empty() {
        return 0.0;
    }
    correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64
}
