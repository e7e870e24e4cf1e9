//! Evaluation metrics: Levenshtein distance, capped utterance WER, CER,
//! corpus BLEU, multiple-choice accuracy and grouped breakdown tables.

mod bleu;
mod breakdown;
mod edit;
mod qa;
mod text;

pub use bleu::{bleu, bleu_with, corpus_bleu, segment_stats, segment_stats_with, BleuConfig, BleuStats};
pub use breakdown::{breakdown, BreakdownRow, BreakdownTable, ScoredItem, UNTAGGED};
pub use edit::edit_distance;
pub use qa::{extract_choice, qa_accuracy, qa_correct, CHOICE_LABELS};
pub use text::{
    capped_utterance_wer, cer, mean_utterance_rate, pooled_rate, utterance_wer, Normalizer, UtteranceError,
};
