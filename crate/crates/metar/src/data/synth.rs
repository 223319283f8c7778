//! Planted-translation synthetic datasets.
//!
//! Entities sit on an integer lattice and every relation is a nonzero
//! lattice step, so z_h + v_r lands exactly on another entity whenever the
//! stepped cell exists. A triple (h, r, t) is built by snapping
//! z_h + v_r + ε to the nearest entity; the snap has a margin of half a
//! lattice spacing, so the planted tail survives any noise_sigma well
//! below 0.5 and under the ideal embeddings the true tail is the exact
//! score minimizer. Heads are only drawn where the stepped cell exists,
//! which keeps every planted tail distinct from its head.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{
    BackgroundMode, DatasetBundle, EntityId, RelationId, Split, TaskGroups, Triple, TripleStore,
    Vocabulary,
};
use crate::error::{Error, Result};
use crate::rng::{derive_stream, STREAM_SYNTH};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_entities: usize,
    /// Latent dimension of the planted geometry (independent of model size).
    pub dim: usize,
    pub n_train_rel: usize,
    pub n_dev_rel: usize,
    pub n_test_rel: usize,
    pub triples_per_rel: usize,
    /// Per-coordinate stddev of the noise added before the tail snap.
    pub noise_sigma: f64,
    /// Size of each relation's candidate list; must hold all its true tails.
    pub candidate_pool: usize,
    pub seed: u64,
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let counts = [
            ("n_entities", self.n_entities),
            ("dim", self.dim),
            ("n_train_rel", self.n_train_rel),
            ("n_dev_rel", self.n_dev_rel),
            ("n_test_rel", self.n_test_rel),
            ("triples_per_rel", self.triples_per_rel),
            ("candidate_pool", self.candidate_pool),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig("noise_sigma must be finite and >= 0".to_string()));
        }
        if self.triples_per_rel > self.n_entities {
            return Err(Error::InfeasibleConfig(format!(
                "triples_per_rel ({}) exceeds n_entities ({}): heads are drawn without replacement",
                self.triples_per_rel, self.n_entities
            )));
        }
        if self.candidate_pool > self.n_entities {
            return Err(Error::InfeasibleConfig(format!(
                "candidate_pool ({}) exceeds n_entities ({})",
                self.candidate_pool, self.n_entities
            )));
        }
        Ok(())
    }
}

/// Latent geometry behind a generated bundle; kept for in-crate checks.
#[cfg_attr(not(test), allow(dead_code))]
struct Latents {
    entities: Vec<Vec<f64>>,
    relations: Vec<Vec<f64>>,
}

/// Entities fill a g-dimensional grid row-major; cells at index
/// >= n_entities do not exist. g is 1 when the latent space is a line,
/// 2 otherwise: two axes already give hundreds of distinct relation steps.
struct Lattice {
    g: usize,
    side: usize,
    n_entities: usize,
    dim: usize,
}

/// Largest per-axis step magnitude a relation may take.
const MAX_STEP: i64 = 3;

impl Lattice {
    fn new(n_entities: usize, dim: usize) -> Self {
        let g = dim.min(2);
        let side = if g == 1 {
            n_entities
        } else {
            (n_entities as f64).sqrt().ceil() as usize
        };
        Lattice { g, side, n_entities, dim }
    }

    fn cell_of(&self, entity: EntityId) -> Vec<i64> {
        if self.g == 1 {
            vec![entity as i64]
        } else {
            vec![(entity / self.side) as i64, (entity % self.side) as i64]
        }
    }

    fn latent_of(&self, entity: EntityId) -> Vec<f64> {
        let mut z = vec![0.0; self.dim];
        for (axis, c) in self.cell_of(entity).iter().enumerate() {
            z[axis] = *c as f64;
        }
        z
    }

    /// Entity at `cell + step`, if that cell exists.
    fn stepped(&self, entity: EntityId, step: &[i64]) -> Option<EntityId> {
        let cell = self.cell_of(entity);
        let mut target = 0usize;
        for (c, s) in cell.iter().zip(step) {
            let moved = c + s;
            if moved < 0 || moved >= self.side as i64 {
                return None;
            }
            target = target * self.side + moved as usize;
        }
        (target < self.n_entities).then_some(target)
    }

    fn random_step(&self, rng: &mut rand_chacha::ChaCha12Rng) -> Vec<i64> {
        loop {
            let step: Vec<i64> =
                (0..self.g).map(|_| rng.gen_range(-MAX_STEP..=MAX_STEP)).collect();
            if step.iter().any(|&s| s != 0) {
                return step;
            }
        }
    }

    fn step_latent(&self, step: &[i64]) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for (axis, s) in step.iter().enumerate() {
            v[axis] = *s as f64;
        }
        v
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the entity nearest to `point`; ties break to the lowest id.
fn nearest_entity(entities: &[Vec<f64>], point: &[f64]) -> EntityId {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (id, z) in entities.iter().enumerate() {
        let d = sq_dist(z, point);
        if d < best_d {
            best_d = d;
            best = id;
        }
    }
    best
}

fn generate_with_latents(cfg: &SynthConfig) -> Result<(DatasetBundle, Latents)> {
    cfg.validate()?;
    let mut rng = derive_stream(cfg.seed, STREAM_SYNTH, 0);

    let mut vocab = Vocabulary::new();
    for i in 0..cfg.n_entities {
        vocab.intern_entity(&format!("e{i}"));
    }
    let split_plan = [
        (Split::Train, cfg.n_train_rel),
        (Split::Dev, cfg.n_dev_rel),
        (Split::Test, cfg.n_test_rel),
    ];
    for (split, count) in split_plan {
        for i in 0..count {
            vocab.intern_relation(&format!("r_{}_{i}", split.name()));
        }
    }

    let lattice = Lattice::new(cfg.n_entities, cfg.dim);
    let entities: Vec<Vec<f64>> =
        (0..cfg.n_entities).map(|e| lattice.latent_of(e)).collect();
    let steps: Vec<Vec<i64>> =
        (0..vocab.n_relations()).map(|_| lattice.random_step(&mut rng)).collect();
    let relations: Vec<Vec<f64>> = steps.iter().map(|s| lattice.step_latent(s)).collect();
    let noise = Normal::new(0.0, cfg.noise_sigma)
        .map_err(|e| Error::InvalidConfig(format!("noise_sigma: {e}")))?;

    let mut train_groups = TaskGroups::new();
    let mut dev_groups = TaskGroups::new();
    let mut test_groups = TaskGroups::new();
    let mut store = TripleStore::new();
    let mut candidates: HashMap<RelationId, Vec<EntityId>> = HashMap::new();

    let mut relation = 0usize;
    for (split, count) in split_plan {
        for _ in 0..count {
            let v_r = &relations[relation];
            let valid_heads: Vec<EntityId> = (0..cfg.n_entities)
                .filter(|&e| lattice.stepped(e, &steps[relation]).is_some())
                .collect();
            if valid_heads.len() < cfg.triples_per_rel {
                return Err(Error::InfeasibleConfig(format!(
                    "relation {} keeps only {} heads inside the lattice, fewer than triples_per_rel ({})",
                    vocab.relation_name(relation),
                    valid_heads.len(),
                    cfg.triples_per_rel
                )));
            }
            let picks =
                rand::seq::index::sample(&mut rng, valid_heads.len(), cfg.triples_per_rel);
            let mut pairs = Vec::with_capacity(cfg.triples_per_rel);
            let mut true_tails: Vec<EntityId> = Vec::new();
            let mut tail_set: HashSet<EntityId> = HashSet::new();
            for idx in picks.iter() {
                let head = valid_heads[idx];
                let mut point: Vec<f64> =
                    entities[head].iter().zip(v_r).map(|(z, v)| z + v).collect();
                for coord in &mut point {
                    *coord += noise.sample(&mut rng);
                }
                let tail = nearest_entity(&entities, &point);
                pairs.push((head, tail));
                store.insert(Triple::new(head, relation, tail));
                if tail_set.insert(tail) {
                    true_tails.push(tail);
                }
            }

            if true_tails.len() > cfg.candidate_pool {
                return Err(Error::InfeasibleConfig(format!(
                    "relation {} has {} distinct true tails, more than candidate_pool ({})",
                    vocab.relation_name(relation),
                    true_tails.len(),
                    cfg.candidate_pool
                )));
            }
            let fill_pool: Vec<EntityId> =
                (0..cfg.n_entities).filter(|e| !tail_set.contains(e)).collect();
            let n_fill = cfg.candidate_pool - true_tails.len();
            let mut list = true_tails;
            for idx in rand::seq::index::sample(&mut rng, fill_pool.len(), n_fill).iter() {
                list.push(fill_pool[idx]);
            }
            // Shuffle so true tails sit at arbitrary positions in the list.
            list.shuffle(&mut rng);
            candidates.insert(relation, list);

            let groups = match split {
                Split::Train => &mut train_groups,
                Split::Dev => &mut dev_groups,
                Split::Test => &mut test_groups,
            };
            groups.insert(relation, pairs);
            relation += 1;
        }
    }

    let mut filtered_truths: HashMap<(EntityId, RelationId), HashSet<EntityId>> = HashMap::new();
    for triple in store.triples() {
        filtered_truths
            .entry((triple.head, triple.relation))
            .or_default()
            .insert(triple.tail);
    }

    let bundle = DatasetBundle {
        vocab,
        store,
        train_groups,
        dev_groups,
        test_groups,
        background_triples: Vec::new(),
        mode: BackgroundMode::InTrain,
        candidates,
        filtered_truths,
    };
    Ok((bundle, Latents { entities, relations }))
}

/// Generate a planted-translation bundle, deterministic in `cfg.seed`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<DatasetBundle> {
    generate_with_latents(cfg).map(|(bundle, _)| bundle)
}
