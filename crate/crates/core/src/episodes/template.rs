use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    Input,
    Sep,
    Target,
    DemoSep,
}

/// Text template with slots `{input}`, `{sep}`, `{target}` and
/// `{demo_sep}`. A query block is rendered up to and including `{target}`;
/// demonstration blocks render the whole template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    source: String,
    segments: Vec<Segment>,
}

pub const DEFAULT_TEMPLATE: &str = "{input}{sep}{target}{demo_sep}";

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::parse(DEFAULT_TEMPLATE).unwrap()
    }
}

impl PromptTemplate {
    pub fn parse(source: &str) -> Result<Self> {
        let mut segments = Vec::new();
        let mut rest = source;
        let mut literal = String::new();
        while !rest.is_empty() {
            let slot = [("{input}", Segment::Input), ("{sep}", Segment::Sep), ("{target}", Segment::Target), ("{demo_sep}", Segment::DemoSep)]
                .into_iter()
                .find(|(name, _)| rest.starts_with(name));
            match slot {
                Some((name, seg)) => {
                    if !literal.is_empty() {
                        segments.push(Segment::Literal(std::mem::take(&mut literal)));
                    }
                    segments.push(seg);
                    rest = &rest[name.len()..];
                }
                None => {
                    let c = rest.chars().next().unwrap();
                    literal.push(c);
                    rest = &rest[c.len_utf8()..];
                }
            }
        }
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal));
        }
        let count = |s: &Segment| segments.iter().filter(|x| *x == s).count();
        if count(&Segment::Input) != 1 || count(&Segment::Target) != 1 {
            return Err(Error::Config(format!("template {source:?} needs exactly one {{input}} and one {{target}}")));
        }
        let pos = |s: &Segment| segments.iter().position(|x| x == s).unwrap();
        if pos(&Segment::Input) > pos(&Segment::Target) {
            return Err(Error::Config(format!("template {source:?} places {{target}} before {{input}}")));
        }
        Ok(PromptTemplate { source: source.to_string(), segments })
    }

    /// Reads a template file; one trailing newline is ignored.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(text.strip_suffix('\n').unwrap_or(&text))
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Segments before `{target}`.
    pub fn prefix(&self) -> &[Segment] {
        let t = self.segments.iter().position(|s| *s == Segment::Target).unwrap();
        &self.segments[..t]
    }

    /// Segments after `{target}`.
    pub fn suffix(&self) -> &[Segment] {
        let t = self.segments.iter().position(|s| *s == Segment::Target).unwrap();
        &self.segments[t + 1..]
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl Serialize for PromptTemplate {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.source)
    }
}

impl<'de> Deserialize<'de> for PromptTemplate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        PromptTemplate::parse(&s).map_err(serde::de::Error::custom)
    }
}
