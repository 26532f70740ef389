// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Every failure surfaced by the toolkit.
#[derive(Debug, Error)]
pub enum LensError {
    /// Operand shapes do not agree.
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape { op: &'static str, left: (usize, usize), right: (usize, usize) },
    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// A layer, head, position, token or vector index is out of range.
    #[error("index out of range: {0}")]
    Index(String),
    /// Sequence longer than the model context.
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    /// A tensor in a weight manifest failed validation.
    #[error("failed to load tensor `{tensor}`: {reason}")]
    Load { tensor: String, reason: String },
    /// A weight name that does not exist in the model.
    #[error("unknown weight `{0}`")]
    UnknownWeight(String),
    /// Question template missing or malformed.
    #[error("template error: {0}")]
    Template(String),
    /// Entity absent from the summary corpus.
    #[error("lookup error: {0}")]
    Lookup(String),
    /// Original and new answers share a first token.
    #[error("ambiguous answers: {0}")]
    Ambiguous(String),
    /// A record in an input file could not be parsed.
    #[error("{}:{line}: {reason}", path.display())]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LensError>;
