//! Token-sequence templates fed to encoders.
//!
//! | input               | layout                                                    |
//! |---------------------|-----------------------------------------------------------|
//! | hr pair             | `[CLS] Xh [SEP] Xr [SEP]`                                 |
//! | tail                | `[CLS] Xt [SEP]`                                          |
//! | masked query        | `[CLS] Xh [E h] [SEP] Xr [SEP] [MASK] [SEP]`              |
//! | masked query (head) | `[CLS] [REVERSE] Xt [E t] [SEP] Xr [SEP] [MASK] [SEP]`    |
//! | joint triple        | `[CLS] Xh [SEP] Xr [SEP] Xt [SEP]`                        |
//!
//! An entity segment is its name, then (optionally) its description and
//! sampled 1-hop neighbors joined with "; ". When a sequence is too long,
//! description/neighbor tokens go first (later segments before earlier
//! ones), then name tokens down to one per segment.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EntityId, KnowledgeGraph, RelationId, Triple};

/// Which end of a triple a query asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "tail")]
    PredictTail,
    #[serde(rename = "head")]
    PredictHead,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::PredictTail => "tail",
            Direction::PredictHead => "head",
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tail" | "predict_tail" => Ok(Direction::PredictTail),
            "head" | "predict_head" => Ok(Direction::PredictHead),
            other => Err(Error::InvalidArgument(format!("unknown direction {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpecialToken {
    Cls,
    Sep,
    Mask,
    Reverse,
    Entity(EntityId),
    Relation(RelationId),
}

impl fmt::Display for SpecialToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpecialToken::Cls => f.write_str("[CLS]"),
            SpecialToken::Sep => f.write_str("[SEP]"),
            SpecialToken::Mask => f.write_str("[MASK]"),
            SpecialToken::Reverse => f.write_str("[REVERSE]"),
            SpecialToken::Entity(id) => write!(f, "[E{}]", id.0),
            SpecialToken::Relation(id) => write!(f, "[R{}]", id.0),
        }
    }
}

impl SpecialToken {
    /// Inverse of `Display`.
    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "[CLS]" => return Some(SpecialToken::Cls),
            "[SEP]" => return Some(SpecialToken::Sep),
            "[MASK]" => return Some(SpecialToken::Mask),
            "[REVERSE]" => return Some(SpecialToken::Reverse),
            _ => {}
        }
        let inner = text.strip_prefix('[')?.strip_suffix(']')?;
        let (kind, digits) = inner.split_at(1.min(inner.len()));
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let n: usize = digits.parse().ok()?;
        match kind {
            "E" => Some(SpecialToken::Entity(EntityId(n))),
            "R" => Some(SpecialToken::Relation(RelationId(n))),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Token {
    Word(String),
    Special(SpecialToken),
}

impl Token {
    pub fn is(&self, special: SpecialToken) -> bool {
        matches!(self, Token::Special(s) if *s == special)
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Word(w) => f.write_str(w),
            Token::Special(s) => s.fmt(f),
        }
    }
}

impl From<SpecialToken> for Token {
    fn from(s: SpecialToken) -> Self {
        Token::Special(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    items: Vec<Token>,
    max_len: usize,
}

impl TokenSequence {
    pub fn new(items: Vec<Token>, max_len: usize) -> Result<Self> {
        if items.len() > max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence of {} tokens exceeds max_len {max_len}",
                items.len()
            )));
        }
        Ok(Self { items, max_len })
    }

    pub fn items(&self) -> &[Token] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn count(&self, special: SpecialToken) -> usize {
        self.items.iter().filter(|t| t.is(special)).count()
    }

    /// Rendered items, one string per token.
    pub fn rendered_tokens(&self) -> Vec<String> {
        self.items.iter().map(Token::to_string).collect()
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.items.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            t.fmt(f)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SerializeConfig {
    pub max_len: usize,
    pub neighbor_k: usize,
    pub lowercase: bool,
    pub description_included: bool,
    pub neighbor_seed: u64,
}

impl Default for SerializeConfig {
    fn default() -> Self {
        Self {
            max_len: 128,
            neighbor_k: 0,
            lowercase: true,
            description_included: true,
            neighbor_seed: 0,
        }
    }
}

impl SerializeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len < 8 {
            return Err(Error::InvalidArgument(format!("max_len must be at least 8, got {}", self.max_len)));
        }
        Ok(())
    }
}

/// Lowercases (optionally), detaches every non-alphanumeric,
/// non-whitespace character into its own token, and splits on Unicode
/// whitespace.
pub fn tokenize(text: &str, cfg: &SerializeConfig) -> Vec<String> {
    let text = if cfg.lowercase { text.to_lowercase() } else { text.to_string() };
    let mut out = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
        } else if ch.is_alphanumeric() {
            current.push(ch);
        } else {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            out.push(ch.to_string());
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Like [`tokenize`], but whitespace-delimited chunks that spell a special
/// token (`[MASK]`, `[SEP]`, `[E12]`, ...) become that special token. Used
/// for cloze probes and hand-written questions.
pub fn parse_marked_text(text: &str, cfg: &SerializeConfig) -> Vec<Token> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        match SpecialToken::parse(chunk) {
            Some(s) => out.push(Token::Special(s)),
            None => out.extend(tokenize(chunk, cfg).into_iter().map(Token::Word)),
        }
    }
    out
}

enum Part {
    Special(SpecialToken),
    Segment { name: Vec<String>, extra: Vec<String> },
}

fn assemble(mut parts: Vec<Part>, max_len: usize) -> Result<TokenSequence> {
    let total = |parts: &[Part]| -> usize {
        parts
            .iter()
            .map(|p| match p {
                Part::Special(_) => 1,
                Part::Segment { name, extra } => name.len() + extra.len(),
            })
            .sum()
    };
    let mut over = total(&parts).saturating_sub(max_len);
    // Passes: extras, then names down to one token, then names down to zero.
    for pass in 0..3 {
        for part in parts.iter_mut().rev() {
            if over == 0 {
                break;
            }
            if let Part::Segment { name, extra } = part {
                let (vec, floor) = match pass {
                    0 => (extra, 0),
                    1 => (name, 1),
                    _ => (name, 0),
                };
                let cut = over.min(vec.len().saturating_sub(floor));
                vec.truncate(vec.len() - cut);
                over -= cut;
            }
        }
    }
    if over > 0 {
        return Err(Error::InvalidArgument(format!("max_len {max_len} is too small for the template")));
    }
    let mut items = Vec::with_capacity(max_len);
    for part in parts {
        match part {
            Part::Special(s) => items.push(Token::Special(s)),
            Part::Segment { name, extra } => items.extend(name.into_iter().chain(extra).map(Token::Word)),
        }
    }
    TokenSequence::new(items, max_len)
}

fn neighbor_seed(base: u64, entity: EntityId) -> u64 {
    crate::linalg::derive_seed(base, entity.0 as u64)
}

fn entity_segment(kg: &KnowledgeGraph, id: EntityId, cfg: &SerializeConfig) -> Result<Part> {
    let entity = kg.entity(id)?;
    let mut context = Vec::new();
    if cfg.description_included && !entity.description.is_empty() {
        context.push(entity.description.clone());
    }
    if cfg.neighbor_k > 0 {
        for edge in kg.sample_neighbors(id, cfg.neighbor_k, neighbor_seed(cfg.neighbor_seed, id))? {
            context.push(kg.verbalize_edge(&edge)?);
        }
    }
    Ok(Part::Segment {
        name: tokenize(&entity.name, cfg),
        extra: tokenize(&context.join("; "), cfg),
    })
}

fn relation_segment(kg: &KnowledgeGraph, id: RelationId, cfg: &SerializeConfig) -> Result<Part> {
    let relation = kg.relation(id)?;
    let extra = if cfg.description_included {
        tokenize(&relation.description, cfg)
    } else {
        Vec::new()
    };
    Ok(Part::Segment {
        name: tokenize(&relation.display_name(), cfg),
        extra,
    })
}

use Part::Special as S;
use SpecialToken::{Cls, Mask, Reverse, Sep};

/// `[CLS] Xh [SEP] Xr [SEP]`
pub fn encode_hr_pair(kg: &KnowledgeGraph, head: EntityId, relation: RelationId, cfg: &SerializeConfig) -> Result<TokenSequence> {
    encode_query_pair(kg, head, relation, Direction::PredictTail, cfg)
}

/// The query tower input for either direction; head-prediction queries get
/// `[REVERSE]` right after `[CLS]` and use the known tail as text.
pub fn encode_query_pair(
    kg: &KnowledgeGraph,
    known: EntityId,
    relation: RelationId,
    direction: Direction,
    cfg: &SerializeConfig,
) -> Result<TokenSequence> {
    cfg.validate()?;
    let mut parts = vec![S(Cls)];
    if direction == Direction::PredictHead {
        parts.push(S(Reverse));
    }
    parts.extend([entity_segment(kg, known, cfg)?, S(Sep), relation_segment(kg, relation, cfg)?, S(Sep)]);
    assemble(parts, cfg.max_len)
}

/// `[CLS] Xt [SEP]`
pub fn encode_tail(kg: &KnowledgeGraph, tail: EntityId, cfg: &SerializeConfig) -> Result<TokenSequence> {
    cfg.validate()?;
    assemble(vec![S(Cls), entity_segment(kg, tail, cfg)?, S(Sep)], cfg.max_len)
}

pub fn encode_masked_query(
    kg: &KnowledgeGraph,
    known: EntityId,
    relation: RelationId,
    direction: Direction,
    cfg: &SerializeConfig,
) -> Result<TokenSequence> {
    cfg.validate()?;
    let mut parts = vec![S(Cls)];
    if direction == Direction::PredictHead {
        parts.push(S(Reverse));
    }
    parts.extend([
        entity_segment(kg, known, cfg)?,
        S(SpecialToken::Entity(known)),
        S(Sep),
        relation_segment(kg, relation, cfg)?,
        S(Sep),
        S(Mask),
        S(Sep),
    ]);
    assemble(parts, cfg.max_len)
}

/// `[CLS] Xh [SEP] Xr [SEP] Xt [SEP]`
pub fn encode_joint_triple(kg: &KnowledgeGraph, triple: &Triple, cfg: &SerializeConfig) -> Result<TokenSequence> {
    cfg.validate()?;
    assemble(
        vec![
            S(Cls),
            entity_segment(kg, triple.head, cfg)?,
            S(Sep),
            relation_segment(kg, triple.relation, cfg)?,
            S(Sep),
            entity_segment(kg, triple.tail, cfg)?,
            S(Sep),
        ],
        cfg.max_len,
    )
}

/// Tokens of an entity name as the generator should produce them.
pub fn entity_name_tokens(kg: &KnowledgeGraph, id: EntityId, cfg: &SerializeConfig) -> Result<Vec<String>> {
    Ok(tokenize(&kg.entity(id)?.name, cfg))
}
