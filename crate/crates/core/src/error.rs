use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report. Variant names are stable and are
/// echoed verbatim by the CLI in its structured error output.
#[derive(Debug, Error)]
pub enum Error {
    #[error("group {group} ({name}) repeats column {index} already used by group {other}")]
    OverlappingGroups {
        group: usize,
        name: String,
        index: usize,
        other: usize,
    },
    #[error("group {group} ({name}) references column {index} but the design has {p} columns")]
    IndexOutOfRange {
        group: usize,
        name: String,
        index: usize,
        p: usize,
    },
    #[error("group {group} ({name}) is empty")]
    EmptyGroup { group: usize, name: String },
    #[error("invalid group specification: {0}")]
    InvalidGroupSpec(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("matrix is not positive semidefinite (pivot {pivot} = {value:e})")]
    NotPositiveSemidefinite { pivot: usize, value: f64 },
    #[error("simulated signal has zero norm; pass an explicit noise level")]
    ZeroSignal,
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("outcome is constant in a binary task")]
    DegenerateOutcome,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("group {group} leaves no conditioning columns")]
    EmptyConditioningSet { group: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("ground truth is all-important or all-null")]
    DegenerateTruth,
    #[error("no null groups in ground truth")]
    NoNullGroups,
    #[error("no important groups in ground truth")]
    NoSignalGroups,
    #[error("malformed metrics: {0}")]
    MalformedMetrics(String),
    #[error("malformed model file: {0}")]
    MalformedModel(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable variant name, used in machine-readable error reports.
    pub fn name(&self) -> &'static str {
        match self {
            Error::OverlappingGroups { .. } => "OverlappingGroups",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::EmptyGroup { .. } => "EmptyGroup",
            Error::InvalidGroupSpec(_) => "InvalidGroupSpec",
            Error::InvalidDataset(_) => "InvalidDataset",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::NotPositiveSemidefinite { .. } => "NotPositiveSemidefinite",
            Error::ZeroSignal => "ZeroSignal",
            Error::NonFiniteLoss(_) => "NonFiniteLoss",
            Error::DegenerateOutcome => "DegenerateOutcome",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::EmptyConditioningSet { .. } => "EmptyConditioningSet",
            Error::TooFewSamples { .. } => "TooFewSamples",
            Error::DegenerateTruth => "DegenerateTruth",
            Error::NoNullGroups => "NoNullGroups",
            Error::NoSignalGroups => "NoSignalGroups",
            Error::MalformedMetrics(_) => "MalformedMetrics",
            Error::MalformedModel(_) => "MalformedModel",
            Error::Io(_) => "Io",
            Error::Csv(_) => "Csv",
            Error::Json(_) => "Json",
        }
    }
}
