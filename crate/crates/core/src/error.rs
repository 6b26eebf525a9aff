// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Everything that can go wrong while generating data, training or analysing.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value is missing, unknown or out of range.
    #[error("config error: {0}")]
    Config(String),

    /// Generated or loaded data violates a structural invariant.
    #[error("data error: {0}")]
    Data(String),

    /// Requested inferred/atomic ratio exceeds what the fact pool can supply.
    #[error("phi = {requested} is infeasible: at most {max_feasible:.4} inferred facts per atomic fact are available")]
    PhiTooLarge { requested: f64, max_feasible: f64 },

    /// Not enough derivable complex-task queries for a balanced test set.
    #[error("only {available} derivable queries with label {label}, {requested} requested")]
    InsufficientQueries {
        label: &'static str,
        available: usize,
        requested: usize,
    },

    /// Training facts imply lower > upper for some entity.
    #[error("contradictory bounds for entity {entity} under attribute {attribute}: {detail}")]
    Contradiction {
        attribute: u32,
        entity: u32,
        detail: String,
    },

    /// A record in a line-delimited file could not be parsed.
    #[error("{}:{line}: {msg}", path.display())]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// File schema version differs from what this build understands.
    #[error("{}: schema version {found}, expected {expected}", path.display())]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    /// Loss or update became NaN/inf.
    #[error("non-finite {what}")]
    NonFinite { what: String },

    /// Tensor or sequence shapes disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Chat endpoint failure.
    #[error("endpoint error: {0}")]
    Endpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit status: 2 configuration, 3 data or I/O, 4 numeric
    /// failure, 5 endpoint.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::PhiTooLarge { .. } => 2,
            Error::Data(_)
            | Error::InsufficientQueries { .. }
            | Error::Contradiction { .. }
            | Error::Format { .. }
            | Error::Version { .. }
            | Error::Shape(_)
            | Error::Io { .. } => 3,
            Error::NonFinite { .. } => 4,
            Error::Endpoint(_) => 5,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
