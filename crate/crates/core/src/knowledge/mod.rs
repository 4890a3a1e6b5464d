//! Emotion factor trees: the knowledge base that grounds each abstract
//! emotion in concrete, frequency-weighted visual elements.
//!
//! Trees are built from per-image annotation records, pruned of rare or
//! stop-listed elements, persisted as JSON, and queried by the planning
//! stage for the elements that best fit a subject.

mod io;
mod scorer;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emotion::EmotionCategory;

pub use io::{load_annotation_records, load_tree_library, parse_tree_library, save_tree_library};
pub use scorer::{ElementScorer, FrequencyScorer};

pub const LIBRARY_VERSION: &str = "1";
pub const DEFAULT_MIN_FREQUENCY: u32 = 5;

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("annotation record {index}: unknown emotion label `{label}`")]
    UnknownEmotion { index: usize, label: String },
    #[error("annotation record {index}: element name is empty")]
    EmptyElementName { index: usize },
    #[error("no annotation records supplied")]
    NoRecords,
    #[error("min_frequency must be at least 1, got {0}")]
    InvalidMinFrequency(u32),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("emotion `{0}` is not present in the library")]
    MissingEmotion(EmotionCategory),
    #[error("duplicate element `{name}` in the `{emotion}` tree")]
    DuplicateElement { emotion: EmotionCategory, name: String },
    #[error("element `{name}` in the `{emotion}` tree has frequency 0")]
    ZeroFrequency { emotion: EmotionCategory, name: String },
    #[error("{context}: {message}")]
    Parse { context: String, message: String },
    #[error("element scorer failed: {0}")]
    Scorer(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementGroup {
    Object,
    Scene,
    Action,
}

impl fmt::Display for ElementGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ElementGroup::Object => "object",
            ElementGroup::Scene => "scene",
            ElementGroup::Action => "action",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VisualElement {
    pub name: String,
    pub frequency: u32,
    pub group: ElementGroup,
}

impl VisualElement {
    pub fn new(name: impl Into<String>, frequency: u32, group: ElementGroup) -> Self {
        Self { name: name.into(), frequency, group }
    }

    /// Case-folded key used for uniqueness and lookups.
    pub fn key(&self) -> String {
        element_key(&self.name)
    }
}

pub(crate) fn element_key(name: &str) -> String {
    name.trim().to_lowercase()
}

/// Leaves ordered by descending frequency, ties by name.
fn leaf_order(a: &VisualElement, b: &VisualElement) -> std::cmp::Ordering {
    b.frequency.cmp(&a.frequency).then_with(|| a.name.cmp(&b.name))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionFactorTree {
    pub root: EmotionCategory,
    leaves: Vec<VisualElement>,
}

impl EmotionFactorTree {
    pub fn empty(root: EmotionCategory) -> Self {
        Self { root, leaves: Vec::new() }
    }

    /// Builds a tree, sorting leaves and rejecting duplicates or zero counts.
    pub fn new(root: EmotionCategory, mut leaves: Vec<VisualElement>) -> Result<Self, KnowledgeError> {
        let mut seen = HashSet::new();
        for leaf in &leaves {
            if leaf.name.trim().is_empty() {
                return Err(KnowledgeError::Parse {
                    context: format!("tree `{root}`"),
                    message: "element with empty name".into(),
                });
            }
            if leaf.frequency == 0 {
                return Err(KnowledgeError::ZeroFrequency { emotion: root, name: leaf.name.clone() });
            }
            if !seen.insert(leaf.key()) {
                return Err(KnowledgeError::DuplicateElement { emotion: root, name: leaf.name.clone() });
            }
        }
        leaves.sort_by(leaf_order);
        Ok(Self { root, leaves })
    }

    pub fn leaves(&self) -> &[VisualElement] {
        &self.leaves
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn find(&self, name: &str) -> Option<&VisualElement> {
        let key = element_key(name);
        self.leaves.iter().find(|l| l.key() == key)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.find(name).is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeLibrary {
    pub version: String,
    trees: BTreeMap<EmotionCategory, EmotionFactorTree>,
}

impl TreeLibrary {
    /// Assembles a library; categories without a tree get an empty one.
    pub fn from_trees(trees: impl IntoIterator<Item = EmotionFactorTree>) -> Self {
        let mut map: BTreeMap<_, _> = trees.into_iter().map(|t| (t.root, t)).collect();
        for emotion in EmotionCategory::ALL {
            map.entry(emotion).or_insert_with(|| EmotionFactorTree::empty(emotion));
        }
        let library = Self { version: LIBRARY_VERSION.to_string(), trees: map };
        for warning in library.warnings() {
            log::warn!("{warning}");
        }
        library
    }

    pub fn tree(&self, emotion: EmotionCategory) -> Option<&EmotionFactorTree> {
        self.trees.get(&emotion)
    }

    pub fn trees(&self) -> impl Iterator<Item = &EmotionFactorTree> {
        self.trees.values()
    }

    /// One message per category whose tree has no leaves.
    pub fn warnings(&self) -> Vec<String> {
        self.trees
            .values()
            .filter(|t| t.is_empty())
            .map(|t| format!("emotion factor tree `{}` has no elements", t.root))
            .collect()
    }

    /// Every emotion whose tree lists `name`.
    pub fn emotions_containing(&self, name: &str) -> Vec<EmotionCategory> {
        self.trees.values().filter(|t| t.contains(name)).map(|t| t.root).collect()
    }

    pub fn prune(&self, min_frequency: u32, stoplist: &HashSet<String>) -> Self {
        Self {
            version: self.version.clone(),
            trees: self
                .trees
                .iter()
                .map(|(e, t)| (*e, prune_elements(t, min_frequency, stoplist)))
                .collect(),
        }
    }
}

/// One annotated image: its emotion label and the visual elements seen in it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub emotion: String,
    pub elements: Vec<AnnotatedElement>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedElement {
    pub name: String,
    pub group: ElementGroup,
}

impl AnnotationRecord {
    pub fn new(emotion: impl Into<String>, elements: &[(&str, ElementGroup)]) -> Self {
        Self {
            emotion: emotion.into(),
            elements: elements
                .iter()
                .map(|(name, group)| AnnotatedElement { name: name.to_string(), group: *group })
                .collect(),
        }
    }
}

/// Aggregates element occurrences per emotion and prunes the result.
///
/// Names are case-folded. When one element is annotated with several
/// groups, the most frequent group wins (declaration order breaks ties).
pub fn build_trees(
    records: &[AnnotationRecord],
    min_frequency: u32,
    stoplist: &HashSet<String>,
) -> Result<TreeLibrary, KnowledgeError> {
    if min_frequency < 1 {
        return Err(KnowledgeError::InvalidMinFrequency(min_frequency));
    }
    if records.is_empty() {
        return Err(KnowledgeError::NoRecords);
    }

    type Counts = HashMap<String, (u32, BTreeMap<ElementGroup, u32>)>;
    let mut per_emotion: BTreeMap<EmotionCategory, Counts> = BTreeMap::new();
    for (index, record) in records.iter().enumerate() {
        let emotion: EmotionCategory = record
            .emotion
            .parse()
            .map_err(|_| KnowledgeError::UnknownEmotion { index, label: record.emotion.clone() })?;
        let counts = per_emotion.entry(emotion).or_default();
        for element in &record.elements {
            let key = element_key(&element.name);
            if key.is_empty() {
                return Err(KnowledgeError::EmptyElementName { index });
            }
            let entry = counts.entry(key).or_default();
            entry.0 += 1;
            *entry.1.entry(element.group).or_default() += 1;
        }
    }

    let mut trees = Vec::new();
    for (emotion, counts) in per_emotion {
        let leaves = counts
            .into_iter()
            .map(|(name, (frequency, groups))| {
                // max_by_key keeps the last maximum; iterate reversed so the
                // earliest group wins a tie.
                let group = groups
                    .iter()
                    .rev()
                    .max_by_key(|(_, n)| **n)
                    .map(|(g, _)| *g)
                    .unwrap_or(ElementGroup::Object);
                VisualElement { name, frequency, group }
            })
            .collect();
        let tree = EmotionFactorTree::new(emotion, leaves)?;
        trees.push(prune_elements(&tree, min_frequency, stoplist));
    }
    Ok(TreeLibrary::from_trees(trees))
}

/// Keeps leaves with `frequency >= min_frequency` whose name is not stop-listed.
///
/// Stoplist entries match case-insensitively.
pub fn prune_elements(
    tree: &EmotionFactorTree,
    min_frequency: u32,
    stoplist: &HashSet<String>,
) -> EmotionFactorTree {
    let stop: HashSet<String> = stoplist.iter().map(|s| element_key(s)).collect();
    EmotionFactorTree {
        root: tree.root,
        leaves: tree
            .leaves
            .iter()
            .filter(|l| l.frequency >= min_frequency && !stop.contains(&l.key()))
            .cloned()
            .collect(),
    }
}

/// Returns up to `k` leaves of the emotion's tree, ranked by `scorer`.
///
/// Whatever the scorer returns is filtered down to distinct leaves of the
/// queried tree before truncation.
pub fn query_elements(
    library: &TreeLibrary,
    emotion: EmotionCategory,
    subject: &str,
    k: usize,
    scorer: &dyn ElementScorer,
    seed: u64,
) -> Result<Vec<VisualElement>, KnowledgeError> {
    if k == 0 {
        return Err(KnowledgeError::InvalidK);
    }
    let tree = library.tree(emotion).ok_or(KnowledgeError::MissingEmotion(emotion))?;
    if tree.is_empty() {
        return Ok(Vec::new());
    }
    let ranked = scorer.rank(emotion, subject, tree.leaves(), seed)?;
    let mut seen = HashSet::new();
    Ok(ranked
        .into_iter()
        .filter_map(|e| tree.find(&e.name).cloned())
        .filter(|e| seen.insert(e.key()))
        .take(k)
        .collect())
}
