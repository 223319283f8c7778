//! Plain translational embedding pretrainer.
//!
//! Supplies entity embeddings for warm-starting the main model and relation
//! embeddings for the baseline that replaces relation meta entirely. Scores
//! ‖h + r − t‖ with a margin hinge, corrupts tails uniformly, and runs SGD
//! over the training-visible triples.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{DatasetBundle, Triple};
use crate::error::{Error, Result};
use crate::model::{score_term, EmbeddingTable, ScoreTerm};
use crate::rng::{derive_stream, STREAM_PRETRAIN};
use crate::scalar::Scalar;
use crate::train::checkpoint::{io_err, Reader, Writer};

#[derive(Debug, Clone, PartialEq)]
pub struct TransEConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub margin: f64,
    pub seed: u64,
}

impl Default for TransEConfig {
    fn default() -> Self {
        Self { dim: 100, epochs: 50, lr: 0.01, margin: 1.0, seed: 42 }
    }
}

impl TransEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidConfig("transe dim must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::InvalidConfig(format!("transe lr must be positive, got {}", self.lr)));
        }
        if !self.margin.is_finite() || self.margin < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "transe margin must be nonnegative, got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

/// Entity and relation embeddings, both indexed by vocabulary id.
#[derive(Debug, Clone, PartialEq)]
pub struct TransEModel<S> {
    pub entities: EmbeddingTable<S>,
    pub relations: EmbeddingTable<S>,
}

const MAGIC: &[u8; 9] = b"METARTRNE";
const FORMAT_VERSION: u32 = 1;

/// Binary layout, little-endian: magic, format version u32, entity count u64,
/// relation count u64, dim u64, then both tables as f64 row-major.
pub fn save_transe<S: Scalar>(model: &TransEModel<S>, path: &Path) -> Result<()> {
    if model.entities.dim() != model.relations.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.entities.dim(),
            got: model.relations.dim(),
            context: "relation table width",
        });
    }
    let write = || -> io::Result<()> {
        let file = fs::File::create(path)?;
        let mut w = Writer { w: BufWriter::new(file) };
        w.w.write_all(MAGIC)?;
        w.u32(FORMAT_VERSION)?;
        w.u64(model.entities.n_rows() as u64)?;
        w.u64(model.relations.n_rows() as u64)?;
        w.u64(model.entities.dim() as u64)?;
        w.scalars(model.entities.data())?;
        w.scalars(model.relations.data())?;
        w.w.flush()
    };
    write().map_err(|e| io_err(path, e))
}

pub fn load_transe<S: Scalar>(path: &Path) -> Result<TransEModel<S>> {
    let buf = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0, path };

    if r.take(MAGIC.len())? != MAGIC {
        return Err(r.bad("bad magic: not a pretrained embedding file"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(r.bad(format!("unsupported format version {version}")));
    }
    let n_entities = r.dim("entity count")?;
    let n_relations = r.dim("relation count")?;
    let dim = r.dim("embedding width")?;
    if n_entities == 0 || n_relations == 0 || dim == 0 {
        return Err(r.bad("empty table shape"));
    }

    let ent_len = n_entities.checked_mul(dim).ok_or_else(|| r.bad("entity table too large"))?;
    let rel_len = n_relations.checked_mul(dim).ok_or_else(|| r.bad("relation table too large"))?;
    let ent_data = r.scalars::<S>(ent_len)?;
    let rel_data = r.scalars::<S>(rel_len)?;
    if r.pos != buf.len() {
        return Err(r.bad(format!("{} trailing bytes after tables", buf.len() - r.pos)));
    }

    Ok(TransEModel {
        entities: EmbeddingTable::from_fn(n_entities, dim, |row, col| ent_data[row * dim + col]),
        relations: EmbeddingTable::from_fn(n_relations, dim, |row, col| rel_data[row * dim + col]),
    })
}

fn unit_or_zero<S: Scalar>(term: &ScoreTerm<S>) -> Vec<S> {
    if term.norm > S::zero() {
        let inv = S::one() / term.norm;
        term.diff.iter().map(|&d| d * inv).collect()
    } else {
        vec![S::zero(); term.diff.len()]
    }
}

fn normalize_rows<S: Scalar>(table: &mut EmbeddingTable<S>) {
    for id in 0..table.n_rows() {
        let row = table.row_mut(id);
        let norm = row.iter().map(|&x| x * x).sum::<S>().sqrt();
        if norm > S::zero() {
            let inv = S::one() / norm;
            for x in row.iter_mut() {
                *x *= inv;
            }
        }
    }
}

fn add_scaled<S: Scalar>(row: &mut [S], v: &[S], scale: S) {
    for (a, x) in row.iter_mut().zip(v) {
        *a += *x * scale;
    }
}

/// Train on an explicit triple list. Entity rows are renormalized to unit
/// length at the start of every epoch; relation rows are normalized once at
/// initialization. `epochs = 0` returns the initialization untouched.
pub fn pretrain_on_triples<S: Scalar>(
    triples: &[Triple],
    n_entities: usize,
    n_relations: usize,
    cfg: &TransEConfig,
) -> Result<TransEModel<S>> {
    cfg.validate()?;
    if triples.is_empty() {
        return Err(Error::InfeasibleConfig("pretraining corpus is empty".into()));
    }
    if n_entities < 2 {
        return Err(Error::InfeasibleConfig(
            "tail corruption needs at least 2 entities".into(),
        ));
    }
    if n_relations == 0 {
        return Err(Error::InfeasibleConfig("pretraining needs at least 1 relation".into()));
    }

    let mut rng = derive_stream(cfg.seed, STREAM_PRETRAIN, 0);
    let limit = 6.0 / (cfg.dim as f64).sqrt();
    let mut entities = EmbeddingTable::<S>::from_fn(n_entities, cfg.dim, |_, _| {
        S::from_f64(rng.gen_range(-limit..limit))
    });
    let mut relations = EmbeddingTable::<S>::from_fn(n_relations, cfg.dim, |_, _| {
        S::from_f64(rng.gen_range(-limit..limit))
    });
    normalize_rows(&mut relations);

    let lr = S::from_f64(cfg.lr);
    let margin = S::from_f64(cfg.margin);
    let mut order: Vec<usize> = (0..triples.len()).collect();
    for _ in 0..cfg.epochs {
        normalize_rows(&mut entities);
        order.shuffle(&mut rng);
        for &ti in &order {
            let triple = triples[ti];
            let corrupt = loop {
                let c = rng.gen_range(0..n_entities);
                if c != triple.tail {
                    break c;
                }
            };
            let pos = score_term(
                entities.row(triple.head),
                relations.row(triple.relation),
                entities.row(triple.tail),
            );
            let neg = score_term(
                entities.row(triple.head),
                relations.row(triple.relation),
                entities.row(corrupt),
            );
            if margin + pos.norm - neg.norm <= S::zero() {
                continue;
            }
            let u_pos = unit_or_zero(&pos);
            let u_neg = unit_or_zero(&neg);
            // d_head, d_rel = u_pos − u_neg; d_tail = −u_pos; d_corrupt = +u_neg.
            let head_step: Vec<S> =
                u_pos.iter().zip(&u_neg).map(|(&p, &n)| -lr * (p - n)).collect();
            add_scaled(entities.row_mut(triple.head), &head_step, S::one());
            add_scaled(relations.row_mut(triple.relation), &head_step, S::one());
            add_scaled(entities.row_mut(triple.tail), &u_pos, lr);
            add_scaled(entities.row_mut(corrupt), &u_neg, -lr);
        }
    }
    Ok(TransEModel { entities, relations })
}

/// Training-visible corpus of a bundle: the train groups plus any background
/// kept by the mode, plus caller-supplied extras (support triples of eval
/// relations, for baselines that must see them). Dev and test queries are
/// never included.
pub fn pretraining_corpus(bundle: &DatasetBundle, extra_triples: &[Triple]) -> Vec<Triple> {
    let mut corpus = Vec::new();
    for (&relation, pairs) in &bundle.train_groups {
        corpus.extend(pairs.iter().map(|&(head, tail)| Triple { head, relation, tail }));
    }
    corpus.extend_from_slice(&bundle.background_triples);
    corpus.extend_from_slice(extra_triples);
    corpus
}

pub fn pretrain_transe<S: Scalar>(
    bundle: &DatasetBundle,
    extra_triples: &[Triple],
    cfg: &TransEConfig,
) -> Result<TransEModel<S>> {
    let corpus = pretraining_corpus(bundle, extra_triples);
    pretrain_on_triples(&corpus, bundle.vocab.n_entities(), bundle.vocab.n_relations(), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::score;

    fn chain_triples() -> Vec<Triple> {
        vec![
            Triple { head: 0, relation: 0, tail: 1 },
            Triple { head: 1, relation: 0, tail: 2 },
        ]
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = TransEConfig { dim: 8, epochs: 0, lr: 0.01, margin: 1.0, seed: 7 };
        let model = pretrain_on_triples::<f64>(&chain_triples(), 3, 1, &cfg).unwrap();
        let again = pretrain_on_triples::<f64>(&chain_triples(), 3, 1, &cfg).unwrap();
        assert_eq!(model, again);
        for id in 0..1 {
            let norm: f64 = model.relations.row(id).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12, "relations normalized at init");
        }
    }

    #[test]
    fn toy_chain_ranks_true_triples_below_corrupted() {
        let cfg = TransEConfig { dim: 8, epochs: 200, lr: 0.05, margin: 1.0, seed: 3 };
        let model = pretrain_on_triples::<f64>(&chain_triples(), 3, 1, &cfg).unwrap();
        let s = |h: usize, t: usize| {
            score(model.entities.row(h), model.relations.row(0), model.entities.row(t))
        };
        // (0, r, 1): corrupt tails are 0 and 2.
        assert!(s(0, 1) < s(0, 0));
        assert!(s(0, 1) < s(0, 2));
        // (1, r, 2): corrupt tails are 0 and 1.
        assert!(s(1, 2) < s(1, 0));
        assert!(s(1, 2) < s(1, 1));
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let cfg = TransEConfig { dim: 6, epochs: 20, lr: 0.02, margin: 1.0, seed: 11 };
        let a = pretrain_on_triples::<f64>(&chain_triples(), 3, 1, &cfg).unwrap();
        let b = pretrain_on_triples::<f64>(&chain_triples(), 3, 1, &cfg).unwrap();
        assert_eq!(a, b);
        let other = TransEConfig { seed: 12, ..cfg };
        let c = pretrain_on_triples::<f64>(&chain_triples(), 3, 1, &other).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let cfg = TransEConfig::default();
        assert!(matches!(
            pretrain_on_triples::<f64>(&[], 3, 1, &cfg).unwrap_err(),
            Error::InfeasibleConfig(_)
        ));
    }

    #[test]
    fn saved_model_round_trips_bitwise() {
        let cfg = TransEConfig { dim: 6, epochs: 20, lr: 0.02, margin: 1.0, seed: 11 };
        let model = pretrain_on_triples::<f64>(&chain_triples(), 3, 1, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("transe.ckpt");
        save_transe(&model, &path).unwrap();
        let loaded = load_transe::<f64>(&path).unwrap();
        let bits = |t: &EmbeddingTable<f64>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&model.entities), bits(&loaded.entities));
        assert_eq!(bits(&model.relations), bits(&loaded.relations));
    }

    #[test]
    fn damaged_embedding_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("transe.ckpt");
        assert!(matches!(load_transe::<f64>(&path).unwrap_err(), Error::MissingFile(_)));

        let model = TransEModel::<f64> {
            entities: EmbeddingTable::from_fn(2, 3, |r, c| (r * 3 + c) as f64),
            relations: EmbeddingTable::from_fn(1, 3, |_, c| c as f64),
        };
        save_transe(&model, &path).unwrap();
        let good = fs::read(&path).unwrap();

        fs::write(&path, &good[..good.len() - 4]).unwrap();
        assert!(matches!(load_transe::<f64>(&path).unwrap_err(), Error::BadCheckpoint { .. }));

        let mut trailing = good.clone();
        trailing.push(0);
        fs::write(&path, trailing).unwrap();
        assert!(matches!(load_transe::<f64>(&path).unwrap_err(), Error::BadCheckpoint { .. }));

        let mut magic = good;
        magic[0] ^= 0xff;
        fs::write(&path, magic).unwrap();
        assert!(matches!(load_transe::<f64>(&path).unwrap_err(), Error::BadCheckpoint { .. }));
    }
}
