// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Errors produced by trace handling, model construction and analysis.
#[derive(Debug, thiserror::Error)]
pub enum StidError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("token role error at index {index}: {msg}")]
    Role { index: usize, msg: String },

    #[error("validation error in `{field}`: {msg}")]
    Validation { field: String, msg: String },

    #[error("empty selection: {0}")]
    EmptySelection(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl StidError {
    /// Stable machine-readable code for each error family.
    pub fn code(&self) -> &'static str {
        match self {
            StidError::Io { .. } => "io",
            StidError::MissingFile(_) => "missing_file",
            StidError::Schema(_) => "schema",
            StidError::ShapeMismatch { .. } => "shape_mismatch",
            StidError::Role { .. } => "role",
            StidError::Validation { .. } => "validation",
            StidError::EmptySelection(_) => "empty_selection",
            StidError::Config(_) => "config",
            StidError::InvalidArgument(_) => "invalid_argument",
            StidError::Degenerate(_) => "degenerate",
            StidError::Json(_) => "json",
            StidError::Csv(_) => "csv",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            StidError::MissingFile(path)
        } else {
            StidError::Io { path, source }
        }
    }

    pub(crate) fn validation(field: impl Into<String>, msg: impl Into<String>) -> Self {
        StidError::Validation {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(what: impl Into<String>, expected: usize, got: usize) -> Self {
        StidError::ShapeMismatch {
            what: what.into(),
            expected,
            got,
        }
    }
}

pub type Result<T> = std::result::Result<T, StidError>;
