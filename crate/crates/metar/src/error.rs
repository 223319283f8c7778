//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed line {line} in {path}: {reason}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("malformed json in {path}: {reason}")]
    MalformedJson { path: PathBuf, reason: String },

    #[error("unknown {kind} name {name:?} in {context}")]
    UnknownName {
        kind: &'static str,
        name: String,
        context: String,
    },

    #[error("relation {relation:?} appears in both {first} and {second} splits")]
    SplitOverlap {
        relation: String,
        first: &'static str,
        second: &'static str,
    },

    #[error("no tasks in split {0}")]
    EmptySplit(&'static str),

    #[error("infeasible configuration: {0}")]
    InfeasibleConfig(String),

    #[error("no eligible relation: every task group has fewer than K+1 triples")]
    NoEligibleRelation,

    #[error("corruption pool exhausted: every pool entity is a true tail of ({head}, {relation})")]
    CorruptionPoolExhausted { head: usize, relation: usize },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("entity id {id} out of bounds for embedding table of {rows} rows")]
    EntityOutOfBounds { id: usize, rows: usize },

    #[error("stale trace: forward pass ran at parameter version {trace}, parameters are at {params}")]
    StaleTrace { trace: u64, params: u64 },

    #[error("non-finite {what} detected at iteration {iteration}")]
    NonFinite { what: &'static str, iteration: u64 },

    #[error("true tail {tail} missing from candidate list of relation {relation}")]
    TrueTailMissingFromCandidates { tail: usize, relation: usize },

    #[error("bad checkpoint {path}: {reason}")]
    BadCheckpoint { path: PathBuf, reason: String },

    #[error("{0}")]
    InvalidConfig(String),
}
