//! Ranking evaluation: per-query filtered rank over candidates, MRR and
//! Hits@N aggregation, report serialization.
//!
//! Lower score = truer, so a query's rank is 1 plus the number of surviving
//! candidates scoring strictly lower than the true tail; ties never worsen
//! the rank. Filtering removes candidates that are other known-true tails
//! for the query's (head, relation).

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetBundle, EntityId, RelationId, Split};
use crate::episode::{corrupt_tail, make_eval_episodes, EvalEpisodeMeta};
use crate::error::{Error, Result};
use crate::model::{adapt_to_support, score, EmbeddingTable, ForwardMode, Hyperparams, ModelParams};
use crate::rng::{derive_stream, STREAM_EVAL_NEGATIVES};
use crate::scalar::Scalar;
use crate::train::transe::TransEModel;

/// Scoring variant: the full method, the ablation that skips the rapid
/// update, or the baseline that swaps relation meta for pretrained
/// translational relation embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Standard,
    MinusG,
    MinusGMinusR,
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Ablation::Standard => "standard",
            Ablation::MinusG => "minus_g",
            Ablation::MinusGMinusR => "minus_g_minus_r",
        })
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Ablation::Standard),
            "minus_g" => Ok(Ablation::MinusG),
            "minus_g_minus_r" => Ok(Ablation::MinusGMinusR),
            other => Err(Error::InvalidConfig(format!(
                "unknown ablation {other:?} (expected standard|minus_g|minus_g_minus_r)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub split: Split,
    pub k: usize,
    pub mode: Ablation,
    /// Seeds the per-relation support-negative streams in standard mode.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationMetrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits5: f64,
    pub hits10: f64,
    pub n_queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mrr: f64,
    pub hits1: f64,
    pub hits5: f64,
    pub hits10: f64,
    pub n_queries: usize,
    /// Keyed by relation name; BTreeMap keeps serialization order stable.
    pub per_relation: BTreeMap<String, RelationMetrics>,
}

/// Aggregate MRR and Hits@{1,5,10} over a set of query ranks.
pub fn metrics_from_ranks(ranks: &[usize]) -> RelationMetrics {
    if ranks.is_empty() {
        return RelationMetrics { mrr: 0.0, hits1: 0.0, hits5: 0.0, hits10: 0.0, n_queries: 0 };
    }
    let n = ranks.len() as f64;
    let hits = |cut: usize| ranks.iter().filter(|&&r| r <= cut).count() as f64 / n;
    RelationMetrics {
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        hits1: hits(1),
        hits5: hits(5),
        hits10: hits(10),
        n_queries: ranks.len(),
    }
}

/// Rank of a true score among competitor scores: 1 + |{s : s < true}|.
pub fn rank_from_scores<S: Scalar>(true_score: S, others: &[S]) -> usize {
    1 + others.iter().filter(|&&s| s < true_score).count()
}

/// Filtered rank of `true_tail` for one query, scoring candidates with the
/// supplied embeddings and relation vector.
pub fn rank_query<S: Scalar>(
    embeddings: &EmbeddingTable<S>,
    head: EntityId,
    relation: RelationId,
    relation_vec: &[S],
    true_tail: EntityId,
    bundle: &DatasetBundle,
) -> Result<usize> {
    let pool = bundle.corruption_pool(relation);
    let truths = bundle.true_tails(head, relation);
    let is_truth = |c: EntityId| truths.map_or(false, |set: &HashSet<EntityId>| set.contains(&c));
    let head_row = embeddings.try_row(head)?;
    let true_score = score(head_row, relation_vec, embeddings.try_row(true_tail)?);

    let mut found = false;
    let mut lower = 0usize;
    for i in 0..pool.len() {
        let c = pool.get(i);
        if c == true_tail {
            found = true;
            continue;
        }
        if is_truth(c) {
            continue;
        }
        if score(head_row, relation_vec, embeddings.try_row(c)?) < true_score {
            lower += 1;
        }
    }
    if !found {
        return Err(Error::TrueTailMissingFromCandidates { tail: true_tail, relation });
    }
    Ok(1 + lower)
}

/// Evaluate one split. Standard mode adapts the relation meta on each task's
/// support set with negatives drawn from a per-relation seeded stream;
/// minus_g transfers the unadapted meta; minus_g_minus_r ignores the model
/// entirely and scores with the pretrained translational embeddings.
/// Parameters are read-only throughout.
pub fn evaluate<S: Scalar>(
    params: &ModelParams<S>,
    transe: Option<&TransEModel<S>>,
    bundle: &DatasetBundle,
    cfg: &EvalConfig,
    hp: &Hyperparams,
) -> Result<(EvalReport, EvalEpisodeMeta)> {
    if cfg.mode == Ablation::MinusGMinusR && transe.is_none() {
        return Err(Error::InvalidConfig(
            "minus_g_minus_r evaluation needs a pretrained translational model".into(),
        ));
    }
    let (episodes, meta) = make_eval_episodes(bundle, cfg.split, cfg.k);

    let mut all_ranks = Vec::new();
    let mut per_relation = BTreeMap::new();
    for episode in &episodes {
        let relation = episode.relation;
        let (embeddings, relation_vec): (&EmbeddingTable<S>, Vec<S>) = match cfg.mode {
            Ablation::Standard => {
                let mut rng = derive_stream(cfg.seed, STREAM_EVAL_NEGATIVES, relation as u64);
                let mut support_neg = Vec::with_capacity(episode.support_pos.len());
                for &(head, _) in &episode.support_pos {
                    support_neg.push((head, corrupt_tail(head, relation, bundle, &mut rng)?));
                }
                let adapted = adapt_to_support(
                    &episode.support_pos,
                    &support_neg,
                    params,
                    hp,
                    ForwardMode::Standard,
                )?;
                (&params.embeddings, adapted.updated_meta)
            }
            Ablation::MinusG => {
                let adapted = adapt_to_support(
                    &episode.support_pos,
                    &[],
                    params,
                    hp,
                    ForwardMode::NoGradientMeta,
                )?;
                debug_assert!(
                    adapted.updated_meta == adapted.relation_meta,
                    "rapid update must be skipped under minus_g"
                );
                (&params.embeddings, adapted.updated_meta)
            }
            Ablation::MinusGMinusR => {
                let model = transe.expect("checked above");
                (&model.entities, model.relations.try_row(relation)?.to_vec())
            }
        };

        let mut ranks = Vec::with_capacity(episode.query_pos.len());
        for &(head, tail) in &episode.query_pos {
            ranks.push(rank_query(embeddings, head, relation, &relation_vec, tail, bundle)?);
        }
        all_ranks.extend_from_slice(&ranks);
        per_relation
            .insert(bundle.vocab.relation_name(relation).to_string(), metrics_from_ranks(&ranks));
    }

    let overall = metrics_from_ranks(&all_ranks);
    let report = EvalReport {
        mrr: overall.mrr,
        hits1: overall.hits1,
        hits5: overall.hits5,
        hits10: overall.hits10,
        n_queries: overall.n_queries,
        per_relation,
    };
    Ok((report, meta))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
}

impl std::fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReportFormat::Text => "text",
            ReportFormat::Json => "json",
        })
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "json" => Ok(ReportFormat::Json),
            other => {
                Err(Error::InvalidConfig(format!("unknown report format {other:?} (text|json)")))
            }
        }
    }
}

pub fn write_report_to(w: &mut impl Write, report: &EvalReport, format: ReportFormat) -> std::io::Result<()> {
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut *w, report)?;
            writeln!(w)
        }
        ReportFormat::Text => {
            if report.n_queries == 0 {
                writeln!(w, "WARNING: no queries evaluated")?;
            }
            writeln!(
                w,
                "{:<28} {:>9} {:>8} {:>8} {:>8} {:>8}",
                "relation", "queries", "MRR", "Hits@10", "Hits@5", "Hits@1"
            )?;
            let row = |w: &mut dyn Write, name: &str, m: &RelationMetrics| {
                writeln!(
                    w,
                    "{:<28} {:>9} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                    name, m.n_queries, m.mrr, m.hits10, m.hits5, m.hits1
                )
            };
            let overall = RelationMetrics {
                mrr: report.mrr,
                hits1: report.hits1,
                hits5: report.hits5,
                hits10: report.hits10,
                n_queries: report.n_queries,
            };
            row(w, "(overall)", &overall)?;
            for (name, metrics) in &report.per_relation {
                row(w, name, metrics)?;
            }
            Ok(())
        }
    }
}

pub fn write_report(report: &EvalReport, path: &Path, format: ReportFormat) -> Result<()> {
    let file = File::create(path).map_err(|source| Error::Io { path: path.into(), source })?;
    let mut w = BufWriter::new(file);
    write_report_to(&mut w, report, format)
        .and_then(|_| w.flush())
        .map_err(|source| Error::Io { path: path.into(), source })
}
