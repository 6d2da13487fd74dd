use std::path::PathBuf;

use drgcl_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing required file {0}")]
    MissingFile(PathBuf),

    #[error("{file}:{line}: {detail}")]
    Parse {
        file: String,
        line: usize,
        detail: String,
    },

    #[error("{file}:{line}: node {node} outside 1..={max}")]
    NodeOutOfRange {
        file: String,
        line: usize,
        node: usize,
        max: usize,
    },

    #[error("graph {0} has no nodes")]
    EmptyGraph(usize),

    #[error("edge ({0}, {1}) joins nodes of different graphs")]
    CrossGraphEdge(usize, usize),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("need at least 2 graphs to form contrastive batches, have {0}")]
    TooFewGraphs(usize),

    #[error("batch size must be at least 2, got {0}")]
    BatchTooSmall(usize),

    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {detail}")]
    Syntax { line: usize, detail: String },

    #[error("unknown key `{0}`")]
    UnknownKey(String),

    #[error("invalid value `{value}` for `{key}`: {detail}")]
    InvalidValue {
        key: String,
        value: String,
        detail: String,
    },

    #[error("inconsistent configuration: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("non-finite {term} at epoch {epoch}, batch {batch}")]
    NonFinite {
        term: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error("width mismatch: {0}")]
    Width(String),

    #[error("{0}")]
    Invalid(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
