//! Bundle statistics, including the one-shot-entity proportion that
//! characterizes how sparse a dataset's training-visible graph is.

use std::collections::{HashMap, HashSet};

use serde::Serialize;

use crate::data::{DatasetBundle, Split, Triple};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SplitStats {
    pub n_relations: usize,
    pub n_triples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub n_entities: usize,
    pub n_relations: usize,
    pub train: SplitStats,
    pub dev: SplitStats,
    pub test: SplitStats,
    pub n_background_triples: usize,
    pub n_store_triples: usize,
    /// Share of training-visible entities that occur in exactly one
    /// training-visible triple.
    pub one_shot_entity_proportion: f64,
}

fn split_stats(bundle: &DatasetBundle, split: Split) -> SplitStats {
    let groups = bundle.groups(split);
    SplitStats {
        n_relations: groups.len(),
        n_triples: groups.values().map(Vec::len).sum(),
    }
}

pub fn dataset_stats(bundle: &DatasetBundle) -> DatasetStats {
    // Training-visible triples: the train task pool (which already holds the
    // background under InTrain) plus background kept aside for pretraining.
    let mut visible: HashSet<Triple> = HashSet::new();
    for (&relation, pairs) in &bundle.train_groups {
        for &(head, tail) in pairs {
            visible.insert(Triple::new(head, relation, tail));
        }
    }
    visible.extend(bundle.background_triples.iter().copied());

    let mut occurrences: HashMap<usize, usize> = HashMap::new();
    for triple in &visible {
        *occurrences.entry(triple.head).or_insert(0) += 1;
        if triple.tail != triple.head {
            *occurrences.entry(triple.tail).or_insert(0) += 1;
        }
    }
    let one_shot = occurrences.values().filter(|&&n| n == 1).count();
    let one_shot_entity_proportion = if occurrences.is_empty() {
        0.0
    } else {
        one_shot as f64 / occurrences.len() as f64
    };

    DatasetStats {
        n_entities: bundle.vocab.n_entities(),
        n_relations: bundle.vocab.n_relations(),
        train: split_stats(bundle, Split::Train),
        dev: split_stats(bundle, Split::Dev),
        test: split_stats(bundle, Split::Test),
        n_background_triples: bundle.background_triples.len(),
        n_store_triples: bundle.store.len(),
        one_shot_entity_proportion,
    }
}

impl std::fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "entities:            {}", self.n_entities)?;
        writeln!(f, "relations:           {}", self.n_relations)?;
        writeln!(
            f,
            "train:               {} relations, {} triples",
            self.train.n_relations, self.train.n_triples
        )?;
        writeln!(
            f,
            "dev:                 {} relations, {} triples",
            self.dev.n_relations, self.dev.n_triples
        )?;
        writeln!(
            f,
            "test:                {} relations, {} triples",
            self.test.n_relations, self.test.n_triples
        )?;
        writeln!(f, "background triples:  {}", self.n_background_triples)?;
        writeln!(f, "store triples:       {}", self.n_store_triples)?;
        write!(f, "one-shot entities:   {:.3}", self.one_shot_entity_proportion)
    }
}
