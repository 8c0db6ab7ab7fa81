//! Instance records, datasets, vocabularies, and episodic task sampling.
//!
//! Instances live on disk as UTF-8 JSON lines, one record per line:
//! `{"tokens": [...], "head": [start, end], "tail": [start, end],
//! "relation": "..."}` with 0-based, end-exclusive token spans. Unknown keys
//! are ignored, so enriched files (e.g. alignment candidates with provenance)
//! load unchanged.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved vocabulary id for padding positions.
pub const PAD_ID: usize = 0;
/// Reserved vocabulary id for out-of-vocabulary tokens.
pub const UNK_ID: usize = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{path}:{line}: {reason}")]
    InvalidInstance {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{path}: no instances")]
    NoInstances { path: String },
    #[error("episode needs {requested} classes, pool has {available}")]
    NotEnoughClasses { requested: usize, available: usize },
    #[error("class {label:?} has {available} instances, episode needs {needed}")]
    ClassTooSmall {
        label: String,
        available: usize,
        needed: usize,
    },
    #[error("episode shape invalid: {reason}")]
    BadTaskShape { reason: String },
    #[error("class {label:?}: {source}")]
    ClassEncode {
        label: String,
        #[source]
        source: Box<DataError>,
    },
    #[error("entity span [{start}, {end}) does not survive truncation to {max_len} tokens")]
    SpanTruncated {
        start: usize,
        end: usize,
        max_len: usize,
    },
    #[error("instance has no tokens")]
    EmptyInstance,
    #[error("vocabulary dump invalid: {reason}")]
    BadVocabDump { reason: String },
}

/// Which corpus a dataset came from; cross-domain data only ever joins
/// training during the enrichment phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Original,
    CrossDomain,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Original => write!(f, "original"),
            Origin::CrossDomain => write!(f, "cross_domain"),
        }
    }
}

/// One labeled sentence: tokens plus head/tail entity spans and a relation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Instance {
    pub tokens: Vec<String>,
    /// Head entity token span, `[start, end)`.
    pub head: (usize, usize),
    /// Tail entity token span, `[start, end)`.
    pub tail: (usize, usize),
    pub relation: String,
}

impl Instance {
    /// Structural validity: non-empty tokens and label, in-bounds non-empty
    /// spans, and non-overlapping head/tail.
    pub fn validate(&self) -> Result<(), String> {
        if self.tokens.is_empty() {
            return Err("tokens empty".into());
        }
        if self.relation.is_empty() {
            return Err("relation label empty".into());
        }
        for (name, (start, end)) in [("head", self.head), ("tail", self.tail)] {
            if start >= end {
                return Err(format!("{name} span [{start}, {end}) is empty or inverted"));
            }
            if end > self.tokens.len() {
                return Err(format!(
                    "{name} span [{start}, {end}) out of bounds for {} tokens",
                    self.tokens.len()
                ));
            }
        }
        if self.head.0 < self.tail.1 && self.tail.0 < self.head.1 {
            return Err(format!(
                "head span [{}, {}) overlaps tail span [{}, {})",
                self.head.0, self.head.1, self.tail.0, self.tail.1
            ));
        }
        Ok(())
    }
}

/// Relation-grouped instances. Classes iterate in label order, which keeps
/// every downstream draw reproducible.
#[derive(Debug, Clone)]
pub struct Dataset {
    classes: BTreeMap<String, Vec<Instance>>,
    origin: Origin,
}

impl Dataset {
    pub fn from_instances(
        instances: impl IntoIterator<Item = Instance>,
        origin: Origin,
    ) -> Self {
        let mut classes: BTreeMap<String, Vec<Instance>> = BTreeMap::new();
        for inst in instances {
            classes.entry(inst.relation.clone()).or_default().push(inst);
        }
        Dataset { classes, origin }
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn instance_count(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.classes.keys().map(String::as_str)
    }

    pub fn instances_of(&self, label: &str) -> Option<&[Instance]> {
        self.classes.get(label).map(Vec::as_slice)
    }

    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        self.classes.values().flatten()
    }

    /// `(label, instances)` views in label order; the sampling pool shape.
    pub fn pool(&self) -> Vec<(&str, &[Instance])> {
        self.classes
            .iter()
            .map(|(label, v)| (label.as_str(), v.as_slice()))
            .collect()
    }
}

/// Load a JSON-lines instance file. Blank lines are skipped; any malformed or
/// invalid line fails the load with its 1-based line number.
pub fn load_dataset(path: impl AsRef<Path>, origin: Origin) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: display.clone(),
        source,
    })?;
    let mut instances = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(line).map_err(|e| DataError::Parse {
            path: display.clone(),
            line: idx + 1,
            reason: e.to_string(),
        })?;
        inst.validate().map_err(|reason| DataError::InvalidInstance {
            path: display.clone(),
            line: idx + 1,
            reason,
        })?;
        instances.push(inst);
    }
    if instances.is_empty() {
        return Err(DataError::NoInstances { path: display });
    }
    Ok(Dataset::from_instances(instances, origin))
}

/// Write a dataset back out in the JSON-lines format, classes in label order.
pub fn write_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut out = String::new();
    for inst in dataset.instances() {
        out.push_str(&serde_json::to_string(inst).expect("instance serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Token granularity for the vocabulary and encoder input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabMode {
    /// Tokens are used as-is.
    Word,
    /// Tokens are exploded into unicode scalar values; datasets meant for
    /// char-mode training should already carry single-character tokens.
    Char,
}

impl fmt::Display for VocabMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VocabMode::Word => write!(f, "word"),
            VocabMode::Char => write!(f, "char"),
        }
    }
}

/// Token-to-id mapping with reserved PAD (0) and UNK (1) entries. Real ids
/// start at 2, assigned in lexicographic token order, so the same corpus
/// always produces the same table.
#[derive(Debug, Clone)]
pub struct Vocab {
    mode: VocabMode,
    ids: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocab {
    /// Collect the distinct tokens (or characters) of every dataset.
    pub fn build(datasets: &[&Dataset], mode: VocabMode) -> Vocab {
        let mut distinct: BTreeSet<String> = BTreeSet::new();
        for ds in datasets {
            for inst in ds.instances() {
                for token in &inst.tokens {
                    match mode {
                        VocabMode::Word => {
                            distinct.insert(token.clone());
                        }
                        VocabMode::Char => {
                            for ch in token.chars() {
                                distinct.insert(ch.to_string());
                            }
                        }
                    }
                }
            }
        }
        Vocab::from_sorted(mode, distinct.into_iter().collect())
    }

    fn from_sorted(mode: VocabMode, sorted: Vec<String>) -> Vocab {
        let mut tokens = Vec::with_capacity(sorted.len() + 2);
        tokens.push("<pad>".to_string());
        tokens.push("<unk>".to_string());
        tokens.extend(sorted);
        let ids = tokens
            .iter()
            .enumerate()
            .skip(2)
            .map(|(id, t)| (t.clone(), id))
            .collect();
        Vocab { mode, ids, tokens }
    }

    /// Rebuild from a dump: the tokens with ids `2..`, in id order.
    pub fn from_parts(mode: VocabMode, stored: Vec<String>) -> Result<Vocab, DataError> {
        let mut seen = BTreeSet::new();
        let mut prev: Option<&String> = None;
        for t in &stored {
            if !seen.insert(t.clone()) {
                return Err(DataError::BadVocabDump {
                    reason: format!("duplicate token {t:?}"),
                });
            }
            if let Some(p) = prev {
                if p > t {
                    return Err(DataError::BadVocabDump {
                        reason: format!("tokens out of order: {p:?} before {t:?}"),
                    });
                }
            }
            prev = Some(t);
        }
        Ok(Vocab::from_sorted(mode, stored))
    }

    pub fn mode(&self) -> VocabMode {
        self.mode
    }

    /// Total entries, reserved ids included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of a token, or [`UNK_ID`] when absent.
    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// The non-reserved tokens in id order, for serialization.
    pub fn stored_tokens(&self) -> &[String] {
        &self.tokens[2..]
    }
}

/// An instance mapped to fixed-length model input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedInstance {
    /// Vocabulary ids, true tokens first, then [`PAD_ID`] up to the padded
    /// length.
    pub token_ids: Vec<usize>,
    /// Position bucket per padded position, relative to the head entity start.
    pub pos_head: Vec<usize>,
    /// Position bucket per padded position, relative to the tail entity start.
    pub pos_tail: Vec<usize>,
    /// Number of real (non-padding) tokens.
    pub true_length: usize,
    /// Episode-local class row this instance belongs to.
    pub relation_slot: usize,
}

/// Offset bucket of token `i` relative to `entity_start`, shifted to be
/// non-negative: `clamp(i - start, -(T-1), T-1) + (T-1)`, in `[0, 2T-2]`.
pub fn position_bucket(index: usize, entity_start: usize, max_len: usize) -> usize {
    let limit = max_len as isize - 1;
    let offset = (index as isize - entity_start as isize).clamp(-limit, limit);
    (offset + limit) as usize
}

/// Map an instance onto padded id sequences. Sentences longer than `max_len`
/// keep their first `max_len` tokens; an entity that would lose tokens to
/// truncation is an error rather than a silently moved span.
pub fn encode_instance(
    inst: &Instance,
    vocab: &Vocab,
    max_len: usize,
    relation_slot: usize,
) -> Result<EncodedInstance, DataError> {
    if inst.tokens.is_empty() {
        return Err(DataError::EmptyInstance);
    }
    if max_len == 0 {
        return Err(DataError::BadTaskShape {
            reason: "max_len must be at least 1".into(),
        });
    }
    for (start, end) in [inst.head, inst.tail] {
        if end > max_len {
            return Err(DataError::SpanTruncated { start, end, max_len });
        }
    }
    let true_length = inst.tokens.len().min(max_len);
    let mut token_ids = vec![PAD_ID; max_len];
    for (slot, token) in token_ids[..true_length].iter_mut().zip(&inst.tokens) {
        *slot = vocab.id(token);
    }
    let pos_head = (0..max_len)
        .map(|i| position_bucket(i, inst.head.0, max_len))
        .collect();
    let pos_tail = (0..max_len)
        .map(|i| position_bucket(i, inst.tail.0, max_len))
        .collect();
    Ok(EncodedInstance {
        token_ids,
        pos_head,
        pos_tail,
        true_length,
        relation_slot,
    })
}

/// One N-way K-shot task with Q queries per class. Row `i` of both grids
/// belongs to `class_labels[i]`, and every instance's `relation_slot` equals
/// its row.
#[derive(Debug, Clone)]
pub struct Episode {
    pub class_labels: Vec<String>,
    pub support: Vec<Vec<EncodedInstance>>,
    pub query: Vec<Vec<EncodedInstance>>,
}

impl Episode {
    pub fn way(&self) -> usize {
        self.class_labels.len()
    }

    pub fn shots(&self) -> usize {
        self.support.first().map_or(0, Vec::len)
    }

    pub fn queries_per_class(&self) -> usize {
        self.query.first().map_or(0, Vec::len)
    }
}

/// Draw an N-way K-shot episode with Q queries per class: N distinct classes
/// uniformly, then K+Q distinct instances per class (first K become support,
/// the rest queries). Fully determined by the state of `rng`.
pub fn sample_episode(
    dataset: &Dataset,
    n: usize,
    k: usize,
    q: usize,
    vocab: &Vocab,
    max_len: usize,
    rng: &mut impl Rng,
) -> Result<Episode, DataError> {
    sample_from_pool(&dataset.pool(), n, k, q, vocab, max_len, rng)
}

/// Episode sampling over an explicit class pool; this is what phase-mixed
/// training uses to draw from the union of two corpora.
pub fn sample_from_pool(
    pool: &[(&str, &[Instance])],
    n: usize,
    k: usize,
    q: usize,
    vocab: &Vocab,
    max_len: usize,
    rng: &mut impl Rng,
) -> Result<Episode, DataError> {
    if n == 0 || k == 0 || q == 0 {
        return Err(DataError::BadTaskShape {
            reason: format!("n={n}, k={k}, q={q}; all must be at least 1"),
        });
    }
    if pool.len() < n {
        return Err(DataError::NotEnoughClasses {
            requested: n,
            available: pool.len(),
        });
    }
    let class_picks = rand::seq::index::sample(rng, pool.len(), n);
    let mut class_labels = Vec::with_capacity(n);
    let mut support = Vec::with_capacity(n);
    let mut query = Vec::with_capacity(n);
    for (slot, class_ix) in class_picks.iter().enumerate() {
        let (label, instances) = pool[class_ix];
        if instances.len() < k + q {
            return Err(DataError::ClassTooSmall {
                label: label.to_string(),
                available: instances.len(),
                needed: k + q,
            });
        }
        let picks = rand::seq::index::sample(rng, instances.len(), k + q);
        let encode = |ix: usize| -> Result<EncodedInstance, DataError> {
            encode_instance(&instances[ix], vocab, max_len, slot).map_err(|e| {
                DataError::ClassEncode {
                    label: label.to_string(),
                    source: Box::new(e),
                }
            })
        };
        let mut srow = Vec::with_capacity(k);
        let mut qrow = Vec::with_capacity(q);
        for (j, ix) in picks.iter().enumerate() {
            if j < k {
                srow.push(encode(ix)?);
            } else {
                qrow.push(encode(ix)?);
            }
        }
        class_labels.push(label.to_string());
        support.push(srow);
        query.push(qrow);
    }
    Ok(Episode {
        class_labels,
        support,
        query,
    })
}

/// Relation labels present in both datasets, sorted. Empty means disjoint.
pub fn verify_disjoint(a: &Dataset, b: &Dataset) -> Vec<String> {
    let b_labels: BTreeSet<&str> = b.labels().collect();
    a.labels()
        .filter(|l| b_labels.contains(l))
        .map(str::to_string)
        .collect()
}

/// The project-wide seeded RNG. ChaCha keeps streams identical across
/// platforms and releases, which the bitwise reproducibility guarantees
/// depend on.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent per-task seed from a master seed (splitmix64-style
/// mixing), so evaluation tasks can be generated in any order or in parallel.
pub fn task_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
