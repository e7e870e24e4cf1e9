use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::template::{PromptTemplate, Segment};
use crate::corpus::{Sample, SampleInput};
use crate::error::{Error, Result};
use crate::metrics::CHOICE_LABELS;
use crate::model::{ModelInput, Position, Tensor};
use crate::tokenizer::{ByteTokenizer, TokenId, BOS, DEMO_SEP, EOS, FRAME, SEP};

/// A retrieved demonstration and its similarity to the query.
#[derive(Debug, Clone, PartialEq)]
pub struct Demo {
    pub sample: Arc<Sample>,
    pub score: f64,
}

/// Token sequence plus loss mask. `demos_kept` indexes the demonstrations
/// that survived the length budget, in sequence order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assembled {
    pub input: ModelInput,
    pub loss_mask: Vec<bool>,
    pub demos_kept: Vec<usize>,
}

impl Assembled {
    pub fn len(&self) -> usize {
        self.input.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.tokens.is_empty()
    }

    pub fn n_masked(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// `" A) one B) two"` for a multiple-choice sample.
pub fn render_choices(choices: &[String]) -> String {
    choices.iter().zip(CHOICE_LABELS).map(|(c, l)| format!(" {l}) {c}")).collect()
}

#[derive(Default)]
struct Builder {
    tokens: Vec<TokenId>,
    positions: Vec<Position>,
    mask: Vec<bool>,
    frames: Vec<f64>,
    frame_cols: usize,
}

impl Builder {
    fn span(&mut self, toks: &[TokenId], block: u16, masked: bool) {
        for (i, &t) in toks.iter().enumerate() {
            self.tokens.push(t);
            self.positions.push(Position { span: i.min(u16::MAX as usize) as u16, block });
            self.mask.push(masked);
        }
    }

    fn input(&mut self, s: &Sample, block: u16) {
        match &s.input {
            SampleInput::Text(t) => self.span(&ByteTokenizer.encode(t), block, false),
            SampleInput::Features(f) => {
                self.span(&vec![FRAME; f.rows], block, false);
                self.frame_cols = f.cols;
                self.frames.extend(f.data.iter().map(|&x| x as f64));
            }
        }
        if let Some(choices) = &s.choices {
            self.span(&ByteTokenizer.encode(&render_choices(choices)), block, false);
        }
    }

    fn segments(&mut self, segs: &[Segment], s: &Sample, block: u16) {
        for seg in segs {
            match seg {
                Segment::Literal(l) => self.span(&ByteTokenizer.encode(l), block, false),
                Segment::Input => self.input(s, block),
                Segment::Sep => self.span(&[SEP], block, false),
                Segment::DemoSep => self.span(&[DEMO_SEP], block, false),
                Segment::Target => unreachable!("target rendered by caller"),
            }
        }
    }

    fn finish(self, demos_kept: Vec<usize>) -> Assembled {
        let rows = if self.frame_cols == 0 { 0 } else { self.frames.len() / self.frame_cols };
        Assembled {
            input: ModelInput {
                tokens: self.tokens,
                frames: Tensor::from_vec(rows, self.frame_cols, self.frames),
                positions: self.positions,
            },
            loss_mask: self.mask,
            demos_kept,
        }
    }
}

fn render(
    demos: &[Demo],
    kept: &[usize],
    query: &Sample,
    template: &PromptTemplate,
    with_target: bool,
    supervise_demos: bool,
) -> Assembled {
    let n = kept.len();
    let mut b = Builder::default();
    b.span(&[BOS], (n + 1).min(u16::MAX as usize) as u16, false);
    for (i, &d) in kept.iter().enumerate() {
        let s = &demos[d].sample;
        let block = (n - i) as u16;
        b.segments(template.prefix(), s, block);
        b.span(&ByteTokenizer.encode(&s.target), block, supervise_demos);
        b.segments(template.suffix(), s, block);
    }
    b.segments(template.prefix(), query, 0);
    if with_target {
        let mut t = ByteTokenizer.encode(&query.target);
        t.push(EOS);
        b.span(&t, 0, true);
    }
    b.finish(kept.to_vec())
}

fn fit(
    demos: &[Demo],
    query: &Sample,
    template: &PromptTemplate,
    budget: usize,
    with_target: bool,
    supervise_demos: bool,
) -> Result<Assembled> {
    let mut kept: Vec<usize> = (0..demos.len()).collect();
    loop {
        let a = render(demos, &kept, query, template, with_target, supervise_demos);
        if a.len() <= budget {
            return Ok(a);
        }
        if kept.is_empty() {
            return Err(Error::SequenceTooLong { len: a.len(), max: budget });
        }
        // lowest similarity goes first; among equals, the one farthest from the query
        let drop = (0..kept.len()).min_by(|&a, &b| demos[kept[a]].score.total_cmp(&demos[kept[b]].score).then(a.cmp(&b))).unwrap();
        kept.remove(drop);
    }
}

/// Training sequence `[BOS] demo… query-prefix target [EOS]` with the loss
/// mask on the query target and EOS. Demonstrations are dropped, lowest
/// similarity first, until the sequence fits `max_len`.
pub fn assemble_sequence(
    demos: &[Demo],
    query: &Sample,
    template: &PromptTemplate,
    max_len: usize,
    supervise_demos: bool,
) -> Result<Assembled> {
    fit(demos, query, template, max_len, true, supervise_demos)
}

/// Generation prompt: the training layout cut before the query target.
pub fn make_eval_prompt(demos: &[Demo], query: &Sample, template: &PromptTemplate, max_len: usize) -> Result<Assembled> {
    fit(demos, query, template, max_len, false, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::FeatureSeq;
    use std::collections::BTreeMap;

    fn text(id: &str, input: &str, target: &str) -> Arc<Sample> {
        Arc::new(Sample {
            id: id.into(),
            task: "t".into(),
            input: SampleInput::Text(input.into()),
            target: target.into(),
            choices: None,
            tags: BTreeMap::new(),
            retrieval_key: None,
        })
    }

    #[test]
    fn mask_covers_query_target_and_eos() {
        let demos = vec![Demo { sample: text("d", "ab", "AB"), score: 0.9 }];
        let q = text("q", "cd", "CD");
        let a = assemble_sequence(&demos, &q, &PromptTemplate::default(), 100, false).unwrap();
        assert_eq!(a.n_masked(), ByteTokenizer.encode("CD").len() + 1);
        // BOS ab SEP AB DEMO_SEP cd SEP CD EOS
        assert_eq!(a.len(), 1 + 2 + 1 + 2 + 1 + 2 + 1 + 2 + 1);
        assert_eq!(*a.input.tokens.last().unwrap(), EOS);
        assert!(a.loss_mask[a.len() - 3..].iter().all(|&m| m));
        assert!(a.loss_mask[..a.len() - 3].iter().all(|&m| !m));
        let blocks: Vec<u16> = a.input.positions.iter().map(|p| p.block).collect();
        assert_eq!(blocks, vec![2, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn features_become_frame_tokens() {
        let s = Arc::new(Sample {
            id: "f".into(),
            task: "t".into(),
            input: SampleInput::Features(FeatureSeq::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])),
            target: "x".into(),
            choices: None,
            tags: BTreeMap::new(),
            retrieval_key: None,
        });
        let a = make_eval_prompt(&[], &s, &PromptTemplate::default(), 100).unwrap();
        assert_eq!(a.input.tokens, vec![BOS, FRAME, FRAME, FRAME, SEP]);
        assert_eq!(a.input.frames.shape(), (3, 2));
        assert_eq!(a.input.frames.data[5], 6.0);
        assert_eq!(a.input.positions[3].span, 2);
    }

    #[test]
    fn choices_rendered_in_label_order() {
        let mut s = (*text("q", "how many", "B")).clone();
        s.choices = Some(vec!["one".into(), "two".into()]);
        let a = make_eval_prompt(&[], &s, &PromptTemplate::default(), 100).unwrap();
        let shown = ByteTokenizer.decode(&a.input.tokens);
        assert_eq!(shown, "how many A) one B) two");
    }

    #[test]
    fn bare_query_over_budget_is_an_error() {
        let q = text("q", "abcdef", "x");
        assert!(matches!(
            assemble_sequence(&[], &q, &PromptTemplate::default(), 5, false),
            Err(Error::SequenceTooLong { .. })
        ));
    }
}
