//! Knowledge-graph data model and dataset bundles.
//!
//! Entities and relations are interned to dense zero-based ids. A
//! [`DatasetBundle`] carries everything one run needs: the per-split task
//! groups, the union triple store used for negative filtering and filtered
//! ranking, per-relation candidate lists, and the background-graph mode.

mod loader;
mod stats;
mod synth;

pub use loader::{load_benchmark, write_benchmark_dir};
pub use stats::{dataset_stats, DatasetStats, SplitStats};
pub use synth::{generate_synthetic, SynthConfig};

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{Error, Result};

pub type EntityId = usize;
pub type RelationId = usize;

/// A fact (head, relation, tail) at the id level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self { head, relation, tail }
    }
}

/// Dense bidirectional mapping between names and ids.
///
/// Ids are contiguous from 0 in first-appearance order (or the order of an
/// explicit id file).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocabulary {
    entity_names: Vec<String>,
    relation_names: Vec<String>,
    entity_ids: HashMap<String, EntityId>,
    relation_ids: HashMap<String, RelationId>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Intern an entity name, assigning the next id on first appearance.
    pub fn intern_entity(&mut self, name: &str) -> EntityId {
        if let Some(&id) = self.entity_ids.get(name) {
            return id;
        }
        let id = self.entity_names.len();
        self.entity_names.push(name.to_string());
        self.entity_ids.insert(name.to_string(), id);
        id
    }

    /// Intern a relation name, assigning the next id on first appearance.
    pub fn intern_relation(&mut self, name: &str) -> RelationId {
        if let Some(&id) = self.relation_ids.get(name) {
            return id;
        }
        let id = self.relation_names.len();
        self.relation_names.push(name.to_string());
        self.relation_ids.insert(name.to_string(), id);
        id
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entity_ids.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relation_ids.get(name).copied()
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        &self.entity_names[id]
    }

    pub fn relation_name(&self, id: RelationId) -> &str {
        &self.relation_names[id]
    }

    pub fn n_entities(&self) -> usize {
        self.entity_names.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relation_names.len()
    }
}

/// Triple list plus a (head, relation) → tails membership index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TripleStore {
    triples: Vec<Triple>,
    membership: HashMap<(EntityId, RelationId), HashSet<EntityId>>,
}

impl TripleStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a triple; duplicates are ignored. Returns whether it was new.
    pub fn insert(&mut self, triple: Triple) -> bool {
        let tails = self.membership.entry((triple.head, triple.relation)).or_default();
        if tails.insert(triple.tail) {
            self.triples.push(triple);
            true
        } else {
            false
        }
    }

    pub fn contains(&self, head: EntityId, relation: RelationId, tail: EntityId) -> bool {
        self.membership
            .get(&(head, relation))
            .is_some_and(|tails| tails.contains(&tail))
    }

    /// True tails of (head, relation), if any.
    pub fn tails(&self, head: EntityId, relation: RelationId) -> Option<&HashSet<EntityId>> {
        self.membership.get(&(head, relation))
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

/// What to do with the background graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackgroundMode {
    /// Keep background triples aside for embedding pretraining.
    PreTrain,
    /// Merge background triples into the train task pool, grouped by relation.
    InTrain,
    /// Drop background triples entirely.
    Discard,
}

impl std::fmt::Display for BackgroundMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackgroundMode::PreTrain => write!(f, "pretrain"),
            BackgroundMode::InTrain => write!(f, "intrain"),
            BackgroundMode::Discard => write!(f, "discard"),
        }
    }
}

impl std::str::FromStr for BackgroundMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(BackgroundMode::PreTrain),
            "intrain" => Ok(BackgroundMode::InTrain),
            "discard" => Ok(BackgroundMode::Discard),
            other => Err(Error::InvalidConfig(format!(
                "unknown background mode {other:?} (expected pretrain|intrain|discard)"
            ))),
        }
    }
}

/// Dataset split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!(
                "unknown split {other:?} (expected train|dev|test)"
            ))),
        }
    }
}

/// Per-relation task pool: relation id → (head, tail) pairs in file order.
pub type TaskGroups = BTreeMap<RelationId, Vec<(EntityId, EntityId)>>;

/// Everything one experiment needs, immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub vocab: Vocabulary,
    /// Union of all triples visible in the chosen mode plus dev/test triples;
    /// consulted for negative filtering and filtered ranking.
    pub store: TripleStore,
    pub train_groups: TaskGroups,
    pub dev_groups: TaskGroups,
    pub test_groups: TaskGroups,
    /// Raw background triples; populated only under [`BackgroundMode::PreTrain`].
    pub background_triples: Vec<Triple>,
    pub mode: BackgroundMode,
    /// Per-relation candidate entity lists for ranking evaluation.
    pub candidates: HashMap<RelationId, Vec<EntityId>>,
    /// (head, relation) → all known true tails; used for filtered ranking.
    pub filtered_truths: HashMap<(EntityId, RelationId), HashSet<EntityId>>,
}

impl DatasetBundle {
    pub fn groups(&self, split: Split) -> &TaskGroups {
        match split {
            Split::Train => &self.train_groups,
            Split::Dev => &self.dev_groups,
            Split::Test => &self.test_groups,
        }
    }

    /// All candidate tails for a relation, or every entity when the relation
    /// has no candidate list.
    pub fn corruption_pool(&self, relation: RelationId) -> CorruptionPool<'_> {
        match self.candidates.get(&relation) {
            Some(list) => CorruptionPool::Candidates(list),
            None => CorruptionPool::AllEntities(self.vocab.n_entities()),
        }
    }

    /// Known true tails for (head, relation) across the whole bundle.
    pub fn true_tails(&self, head: EntityId, relation: RelationId) -> Option<&HashSet<EntityId>> {
        self.filtered_truths
            .get(&(head, relation))
            .or_else(|| self.store.tails(head, relation))
    }
}

/// The pool negatives are drawn from.
#[derive(Debug, Clone, Copy)]
pub enum CorruptionPool<'a> {
    Candidates(&'a [EntityId]),
    AllEntities(usize),
}

impl CorruptionPool<'_> {
    pub fn len(&self) -> usize {
        match self {
            CorruptionPool::Candidates(list) => list.len(),
            CorruptionPool::AllEntities(n) => *n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, index: usize) -> EntityId {
        match self {
            CorruptionPool::Candidates(list) => list[index],
            CorruptionPool::AllEntities(_) => index,
        }
    }
}
