//! Corpus construction by dictionary alignment: longest-exact-match entity
//! labeling, two-entity candidate extraction, and a segmentation-consistency
//! filter.
//!
//! All offsets here count unicode scalar values, not bytes, so spans stay
//! meaningful for scripts without word separators. Matching is case- and
//! diacritic-exact: dictionary surfaces are assumed canonical.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use thiserror::Error;

use crate::data::Instance;

/// Relation placeholder written into extracted candidates; downstream manual
/// tagging replaces it.
pub const UNLABELED: &str = "UNLABELED";

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}:{line}: {reason}")]
    DictParse {
        origin: String,
        line: usize,
        reason: String,
    },
    #[error("segmentation does not reconstruct the sentence: {reason}")]
    SegmentationMismatch { reason: String },
    #[error("entity {surface:?} does not align with the segmentation")]
    NotSegmentAligned { surface: String },
    #[error("candidate does not form a valid instance: {reason}")]
    InvalidCandidate { reason: String },
}

#[derive(Debug, Default)]
struct TrieNode {
    children: HashMap<char, TrieNode>,
    terminal: bool,
}

/// A set of (surface, entity type) pairs with an index for scanning text.
/// A surface may carry several types; matching only cares about surfaces.
#[derive(Debug, Default)]
pub struct EntityDictionary {
    by_surface: BTreeMap<String, BTreeSet<String>>,
    root: TrieNode,
    pairs: usize,
}

impl EntityDictionary {
    pub fn new() -> EntityDictionary {
        EntityDictionary::default()
    }

    /// Add one (surface, type) pair. Returns whether the pair was new;
    /// duplicates leave the dictionary unchanged. Empty surfaces and types
    /// are rejected.
    pub fn insert(&mut self, surface: &str, entity_type: &str) -> Result<bool, AlignError> {
        if surface.is_empty() {
            return Err(AlignError::DictParse {
                origin: "<insert>".into(),
                line: 0,
                reason: "empty surface".into(),
            });
        }
        if entity_type.is_empty() {
            return Err(AlignError::DictParse {
                origin: "<insert>".into(),
                line: 0,
                reason: format!("empty type for surface {surface:?}"),
            });
        }
        let new = self
            .by_surface
            .entry(surface.to_string())
            .or_default()
            .insert(entity_type.to_string());
        if new {
            self.pairs += 1;
            let mut node = &mut self.root;
            for ch in surface.chars() {
                node = node.children.entry(ch).or_default();
            }
            node.terminal = true;
        }
        Ok(new)
    }

    /// Parse dictionary text: one `surface<TAB>type` entry per line, blank
    /// lines skipped. `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<EntityDictionary, AlignError> {
        let mut dict = EntityDictionary::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let (surface, entity_type) = line.split_once('\t').ok_or_else(|| {
                AlignError::DictParse {
                    origin: origin.to_string(),
                    line: idx + 1,
                    reason: "expected surface<TAB>type".into(),
                }
            })?;
            dict.insert(surface, entity_type)
                .map_err(|e| match e {
                    AlignError::DictParse { reason, .. } => AlignError::DictParse {
                        origin: origin.to_string(),
                        line: idx + 1,
                        reason,
                    },
                    other => other,
                })?;
        }
        Ok(dict)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<EntityDictionary, AlignError> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| AlignError::Io {
            path: display.clone(),
            source,
        })?;
        EntityDictionary::parse(&text, &display)
    }

    /// Number of distinct (surface, type) pairs.
    pub fn len(&self) -> usize {
        self.pairs
    }

    pub fn is_empty(&self) -> bool {
        self.pairs == 0
    }

    /// Whether any entry has this exact surface.
    pub fn contains(&self, surface: &str) -> bool {
        self.by_surface.contains_key(surface)
    }

    /// All types recorded for a surface, joined with `|` in sorted order.
    pub fn types_of(&self, surface: &str) -> Option<String> {
        self.by_surface
            .get(surface)
            .map(|types| types.iter().cloned().collect::<Vec<_>>().join("|"))
    }

    pub fn surfaces(&self) -> impl Iterator<Item = &str> {
        self.by_surface.keys().map(String::as_str)
    }
}

/// A matched region, counted in unicode scalar values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MatchSpan {
    pub start: usize,
    pub len: usize,
}

impl MatchSpan {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    /// Strict containment: `self` covers all of `other` and is longer.
    pub fn strictly_contains(&self, other: &MatchSpan) -> bool {
        self.start <= other.start && self.end() >= other.end() && self.len > other.len
    }
}

/// Every dictionary match in `s` that no strictly containing match
/// suppresses. Overlapping matches that don't contain each other are all
/// kept, and the same surface matching at two positions yields two spans.
/// Spans come back sorted by (start, len).
pub fn longest_exact_match(s: &str, dict: &EntityDictionary) -> Vec<MatchSpan> {
    let chars: Vec<char> = s.chars().collect();
    let mut matches = Vec::new();
    for start in 0..chars.len() {
        let mut node = &dict.root;
        for (depth, &ch) in chars[start..].iter().enumerate() {
            match node.children.get(&ch) {
                Some(next) => {
                    node = next;
                    if node.terminal {
                        matches.push(MatchSpan {
                            start,
                            len: depth + 1,
                        });
                    }
                }
                None => break,
            }
        }
    }
    let kept: Vec<MatchSpan> = matches
        .iter()
        .filter(|a| !matches.iter().any(|b| b.strictly_contains(a)))
        .copied()
        .collect();
    kept
}

/// One labeled entity occurrence inside a candidate sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityMention {
    pub span: MatchSpan,
    pub surface: String,
    /// The surface's dictionary types, `|`-joined.
    pub types: String,
}

/// A sentence with two labeled entities, ready for manual relation tagging.
#[derive(Debug, Clone)]
pub struct CandidateSentence {
    pub text: String,
    /// The earlier of the two spans.
    pub head: EntityMention,
    pub tail: EntityMention,
    /// 1-based line number in the source corpus.
    pub line: usize,
    /// Whether the sentence had more than two matched spans, making this one
    /// pair of several.
    pub multi_pair: bool,
}

/// Counts reported alongside extraction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExtractionSummary {
    /// Non-blank sentences read.
    pub sentences: usize,
    /// Sentences that produced at least one candidate.
    pub kept: usize,
    /// Sentences with fewer than two matched spans.
    pub dropped: usize,
    /// Kept sentences that had more than two spans.
    pub multi_pair_sentences: usize,
    /// Candidates emitted in total.
    pub candidates: usize,
}

/// Label every sentence with its longest matches and emit one candidate per
/// unordered span pair, preserving input order. Sentences with fewer than
/// two matches are dropped; sentences with more than two have every
/// candidate flagged `multi_pair`.
pub fn extract_candidates<'a>(
    sentences: impl IntoIterator<Item = &'a str>,
    dict: &EntityDictionary,
) -> (Vec<CandidateSentence>, ExtractionSummary) {
    let mut out = Vec::new();
    let mut summary = ExtractionSummary::default();
    for (idx, sentence) in sentences.into_iter().enumerate() {
        if sentence.trim().is_empty() {
            continue;
        }
        summary.sentences += 1;
        let spans = longest_exact_match(sentence, dict);
        if spans.len() < 2 {
            summary.dropped += 1;
            continue;
        }
        summary.kept += 1;
        let multi_pair = spans.len() > 2;
        if multi_pair {
            summary.multi_pair_sentences += 1;
        }
        let chars: Vec<char> = sentence.chars().collect();
        let mention = |span: MatchSpan| -> EntityMention {
            let surface: String = chars[span.start..span.end()].iter().collect();
            let types = dict
                .types_of(&surface)
                .expect("matched surface is in the dictionary");
            EntityMention { span, surface, types }
        };
        for i in 0..spans.len() {
            for j in i + 1..spans.len() {
                out.push(CandidateSentence {
                    text: sentence.to_string(),
                    head: mention(spans[i]),
                    tail: mention(spans[j]),
                    line: idx + 1,
                    multi_pair,
                });
                summary.candidates += 1;
            }
        }
    }
    (out, summary)
}

/// Character offsets where segmentation words start and end. Errors unless
/// the words concatenate exactly to `text`.
fn word_boundaries(
    text: &str,
    segmentation: &[String],
) -> Result<(BTreeSet<usize>, BTreeSet<usize>), AlignError> {
    let mut starts = BTreeSet::new();
    let mut ends = BTreeSet::new();
    let mut offset = 0usize;
    for word in segmentation {
        starts.insert(offset);
        offset += word.chars().count();
        ends.insert(offset);
    }
    let text_chars = text.chars().count();
    if offset != text_chars {
        return Err(AlignError::SegmentationMismatch {
            reason: format!("words cover {offset} chars, sentence has {text_chars}"),
        });
    }
    let joined: String = segmentation.concat();
    if joined != text {
        return Err(AlignError::SegmentationMismatch {
            reason: "joined words differ from the sentence text".into(),
        });
    }
    Ok((starts, ends))
}

/// Keep a candidate only if each entity surface is exactly the concatenation
/// of a consecutive run of segmentation words at the entity's position — an
/// entity straddling a word boundary is discarded.
pub fn segmentation_filter(
    cand: &CandidateSentence,
    segmentation: &[String],
) -> Result<bool, AlignError> {
    let (starts, ends) = word_boundaries(&cand.text, segmentation)?;
    Ok([&cand.head, &cand.tail].iter().all(|m| {
        starts.contains(&m.span.start) && ends.contains(&m.span.end())
    }))
}

/// Turn a candidate into a character-tokenized instance: every unicode
/// scalar of the sentence becomes one token, entity spans carry over
/// directly, and the relation is [`UNLABELED`]. Candidates whose two spans
/// overlap cannot form a valid instance and are rejected.
pub fn char_instance(cand: &CandidateSentence) -> Result<Instance, AlignError> {
    let tokens: Vec<String> = cand.text.chars().map(|c| c.to_string()).collect();
    let inst = Instance {
        tokens,
        head: (cand.head.span.start, cand.head.span.end()),
        tail: (cand.tail.span.start, cand.tail.span.end()),
        relation: UNLABELED.to_string(),
    };
    inst.validate()
        .map_err(|reason| AlignError::InvalidCandidate { reason })?;
    Ok(inst)
}

/// Turn a candidate into a word-tokenized instance using its segmentation:
/// tokens are the segmentation words and entity spans become word-index
/// ranges. Requires both entities to align with word boundaries (i.e. the
/// candidate passed [`segmentation_filter`] with this segmentation).
pub fn word_instance(
    cand: &CandidateSentence,
    segmentation: &[String],
) -> Result<Instance, AlignError> {
    let (starts, _) = word_boundaries(&cand.text, segmentation)?;
    let span_to_words = |m: &EntityMention| -> Result<(usize, usize), AlignError> {
        let mut first = None;
        let mut after = None;
        let mut offset = 0usize;
        for (w, word) in segmentation.iter().enumerate() {
            if offset == m.span.start {
                first = Some(w);
            }
            offset += word.chars().count();
            if offset == m.span.end() {
                after = Some(w + 1);
                break;
            }
        }
        match (first, after) {
            (Some(f), Some(a)) if f < a => Ok((f, a)),
            _ => Err(AlignError::NotSegmentAligned {
                surface: m.surface.clone(),
            }),
        }
    };
    // starts is only needed to force the reconstruction check before the
    // span walk; the walk itself re-derives offsets.
    let _ = starts;
    let head = span_to_words(&cand.head)?;
    let tail = span_to_words(&cand.tail)?;
    let inst = Instance {
        tokens: segmentation.to_vec(),
        head,
        tail,
        relation: UNLABELED.to_string(),
    };
    inst.validate()
        .map_err(|reason| AlignError::InvalidCandidate { reason })?;
    Ok(inst)
}
