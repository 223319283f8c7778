//! Few-shot task construction.
//!
//! A training task pairs K support positives (plus one corrupted negative
//! each) with a handful of query positives (plus their corrupted negatives).
//! Evaluation episodes are deterministic: support is the first K triples in
//! file order and every remaining triple becomes a query positive, so each
//! evaluable triple is scored exactly once.

use std::collections::HashSet;

use rand::Rng;

use crate::data::{CorruptionPool, DatasetBundle, EntityId, RelationId, Split};
use crate::error::{Error, Result};

/// One few-shot task over a single relation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeTask {
    pub relation: RelationId,
    /// K reference pairs the learner adapts on.
    pub support_pos: Vec<(EntityId, EntityId)>,
    /// One corrupted tail per support positive (same order).
    pub support_neg: Vec<(EntityId, EntityId)>,
    pub query_pos: Vec<(EntityId, EntityId)>,
    /// Corrupted tails per query positive (same order, inner length n_neg).
    pub query_neg: Vec<Vec<EntityId>>,
}

impl EpisodeTask {
    /// Check the structural invariants against the bundle; used by tests and
    /// the acceptance suite.
    pub fn validate(&self, bundle: &DatasetBundle, k: usize) -> Result<()> {
        if self.support_pos.len() != k {
            return Err(Error::InvalidConfig(format!(
                "support size {} != K={k}",
                self.support_pos.len()
            )));
        }
        if self.support_neg.len() != self.support_pos.len() {
            return Err(Error::InvalidConfig("one support negative per positive".to_string()));
        }
        if self.query_neg.len() != self.query_pos.len() {
            return Err(Error::InvalidConfig("one negative group per query positive".to_string()));
        }
        let group: HashSet<(EntityId, EntityId)> = bundle
            .groups(Split::Train)
            .get(&self.relation)
            .map(|pairs| pairs.iter().copied().collect())
            .unwrap_or_default();
        for &(head, tail) in self.support_pos.iter().chain(&self.query_pos) {
            if !group.contains(&(head, tail)) {
                return Err(Error::InvalidConfig(format!(
                    "pair ({head}, {tail}) does not belong to relation {}",
                    self.relation
                )));
            }
        }
        let support: HashSet<(EntityId, EntityId)> = self.support_pos.iter().copied().collect();
        for pair in &self.query_pos {
            if support.contains(pair) {
                return Err(Error::InvalidConfig(format!(
                    "pair ({}, {}) is in both support and query",
                    pair.0, pair.1
                )));
            }
        }
        for (&(head, _), &(neg_head, neg_tail)) in self.support_pos.iter().zip(&self.support_neg) {
            if neg_head != head {
                return Err(Error::InvalidConfig("negative must keep its positive's head".into()));
            }
            if bundle.store.contains(head, self.relation, neg_tail) {
                return Err(Error::InvalidConfig(format!(
                    "corrupted support triple ({head}, {}, {neg_tail}) exists in the store",
                    self.relation
                )));
            }
        }
        for (&(head, _), negs) in self.query_pos.iter().zip(&self.query_neg) {
            for &neg_tail in negs {
                if bundle.store.contains(head, self.relation, neg_tail) {
                    return Err(Error::InvalidConfig(format!(
                        "corrupted query triple ({head}, {}, {neg_tail}) exists in the store",
                        self.relation
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    /// Shot count K.
    pub k: usize,
    pub n_query_pos: usize,
    pub n_neg_per_pos: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in
            [("k", self.k), ("n_query_pos", self.n_query_pos), ("n_neg_per_pos", self.n_neg_per_pos)]
        {
            if value == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

const CORRUPT_RETRIES: usize = 32;

/// Draw a corrupted tail for (head, relation): uniform over the corruption
/// pool minus the known true tails. Bounded rejection sampling first, then an
/// explicit set difference so a dense true-tail set cannot loop forever.
pub fn corrupt_tail<R: Rng + ?Sized>(
    head: EntityId,
    relation: RelationId,
    bundle: &DatasetBundle,
    rng: &mut R,
) -> Result<EntityId> {
    let pool = bundle.corruption_pool(relation);
    if !pool.is_empty() {
        for _ in 0..CORRUPT_RETRIES {
            let candidate = pool.get(rng.gen_range(0..pool.len()));
            if !bundle.store.contains(head, relation, candidate) {
                return Ok(candidate);
            }
        }
    }
    let legal: Vec<EntityId> = match pool {
        CorruptionPool::Candidates(list) => list
            .iter()
            .copied()
            .filter(|&e| !bundle.store.contains(head, relation, e))
            .collect(),
        CorruptionPool::AllEntities(n) => {
            (0..n).filter(|&e| !bundle.store.contains(head, relation, e)).collect()
        }
    };
    if legal.is_empty() {
        return Err(Error::CorruptionPoolExhausted { head, relation });
    }
    Ok(legal[rng.gen_range(0..legal.len())])
}

/// Sample one training task: a uniform choice among train relations holding
/// at least K+1 triples, then a without-replacement draw of K support and up
/// to n_query_pos query positives.
pub fn sample_episode<R: Rng + ?Sized>(
    bundle: &DatasetBundle,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<EpisodeTask> {
    cfg.validate()?;
    let eligible: Vec<RelationId> = bundle
        .train_groups
        .iter()
        .filter(|(_, pairs)| pairs.len() >= cfg.k + 1)
        .map(|(&relation, _)| relation)
        .collect();
    if eligible.is_empty() {
        return Err(Error::NoEligibleRelation);
    }
    let relation = eligible[rng.gen_range(0..eligible.len())];
    let pairs = &bundle.train_groups[&relation];

    let n_query = cfg.n_query_pos.min(pairs.len() - cfg.k);
    let drawn = rand::seq::index::sample(rng, pairs.len(), cfg.k + n_query).into_vec();
    let support_pos: Vec<_> = drawn[..cfg.k].iter().map(|&i| pairs[i]).collect();
    let query_pos: Vec<_> = drawn[cfg.k..].iter().map(|&i| pairs[i]).collect();
    debug_assert!(
        {
            let support: HashSet<_> = support_pos.iter().collect();
            query_pos.iter().all(|p| !support.contains(p))
        },
        "task group holds duplicate pairs"
    );

    let mut support_neg = Vec::with_capacity(support_pos.len());
    for &(head, _) in &support_pos {
        support_neg.push((head, corrupt_tail(head, relation, bundle, rng)?));
    }
    let mut query_neg = Vec::with_capacity(query_pos.len());
    for &(head, _) in &query_pos {
        let mut negs = Vec::with_capacity(cfg.n_neg_per_pos);
        for _ in 0..cfg.n_neg_per_pos {
            negs.push(corrupt_tail(head, relation, bundle, rng)?);
        }
        query_neg.push(negs);
    }

    Ok(EpisodeTask { relation, support_pos, support_neg, query_pos, query_neg })
}

/// Bookkeeping from evaluation-episode construction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvalEpisodeMeta {
    /// Relations skipped for having too few triples to form support + query.
    pub skipped_relations: Vec<RelationId>,
}

impl EvalEpisodeMeta {
    pub fn skipped(&self) -> usize {
        self.skipped_relations.len()
    }
}

/// Deterministic evaluation episodes for a dev or test split. Negatives are
/// left empty here; ranking scores candidates instead, and the evaluator adds
/// seeded support negatives itself when its mode needs a rapid update.
pub fn make_eval_episodes(
    bundle: &DatasetBundle,
    split: Split,
    k: usize,
) -> (Vec<EpisodeTask>, EvalEpisodeMeta) {
    let mut episodes = Vec::new();
    let mut meta = EvalEpisodeMeta::default();
    for (&relation, pairs) in bundle.groups(split) {
        if pairs.len() <= k {
            meta.skipped_relations.push(relation);
            continue;
        }
        episodes.push(EpisodeTask {
            relation,
            support_pos: pairs[..k].to_vec(),
            support_neg: Vec::new(),
            query_pos: pairs[k..].to_vec(),
            query_neg: Vec::new(),
        });
    }
    (episodes, meta)
}
