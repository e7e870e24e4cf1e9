//! Grouped score tables (group, item, n, mean score) with an overall row.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label used for items that lack a tag of the grouping key.
pub const UNTAGGED: &str = "(untagged)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub id: String,
    pub task: String,
    pub hypothesis: String,
    pub reference: String,
    /// wer / cer / bleu / correctness, in `[0, 1]`.
    pub score: f64,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub group: String,
    pub item: String,
    pub n: usize,
    pub score: f64,
    /// `Σ score` over the row; an integer count for 0/1 scores.
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownTable {
    pub rows: Vec<BreakdownRow>,
    pub overall: BreakdownRow,
}

fn row(group: &str, item: &str, scores: &[f64]) -> BreakdownRow {
    let total: f64 = scores.iter().sum();
    let n = scores.len();
    BreakdownRow { group: group.into(), item: item.into(), n, score: if n == 0 { 0.0 } else { total / n as f64 }, total }
}

/// Builds one block of rows per grouping key and checks that every
/// grouping conserves the overall item count and score mass.
pub fn breakdown(items: &[ScoredItem], groupings: &[&str]) -> Result<BreakdownTable> {
    let all: Vec<f64> = items.iter().map(|i| i.score).collect();
    let overall = row("Overall", "Total", &all);
    let binary = items.iter().all(|i| i.score == 0.0 || i.score == 1.0);
    let mut rows = Vec::new();
    for &g in groupings {
        let mut buckets: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for it in items {
            let label = it.tags.get(g).map(String::as_str).unwrap_or(UNTAGGED);
            buckets.entry(label).or_default().push(it.score);
        }
        let block: Vec<BreakdownRow> = buckets.iter().map(|(label, s)| row(g, label, s)).collect();
        let n: usize = block.iter().map(|r| r.n).sum();
        let mass: f64 = block.iter().map(|r| r.total).sum();
        if n != overall.n {
            return Err(Error::Invariant(format!("grouping {g:?} covers {n} of {} items", overall.n)));
        }
        let conserved = if binary {
            mass.round() as i64 == overall.total.round() as i64
        } else {
            (mass - overall.total).abs() <= 1e-9 * overall.total.abs().max(1.0)
        };
        if !conserved {
            return Err(Error::Invariant(format!("grouping {g:?} score mass {mass} != overall {}", overall.total)));
        }
        rows.extend(block);
    }
    Ok(BreakdownTable { rows, overall })
}

impl BreakdownTable {
    /// Aligned plain-text rendering with scores as percentages.
    pub fn render(&self, title: &str) -> String {
        let gw = self.rows.iter().map(|r| r.group.len()).chain([5, "Overall".len()]).max().unwrap();
        let iw = self.rows.iter().map(|r| r.item.len()).chain([4, "Total".len()]).max().unwrap();
        let mut s = String::new();
        let _ = writeln!(s, "{title}");
        let _ = writeln!(s, "{:<gw$}  {:<iw$}  {:>6}  {:>8}", "Group", "Item", "n", "score");
        let mut last_group = "";
        for r in self.rows.iter().chain(std::iter::once(&self.overall)) {
            if !last_group.is_empty() && r.group != last_group {
                let _ = writeln!(s, "{}", "-".repeat(gw + iw + 20));
            }
            last_group = &r.group;
            let _ = writeln!(s, "{:<gw$}  {:<iw$}  {:>6}  {:>7.2}%", r.group, r.item, r.n, 100.0 * r.score);
        }
        s
    }
}
