use std::path::PathBuf;

use crate::data::CellKey;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("input has no data rows")]
    EmptyInput,

    #[error("column `{0}` not found in header")]
    MissingColumn(String),

    #[error("row {row}: column `{column}` must be 0 or 1, found `{value}`")]
    NonBinary {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}: column `{column}` is not a finite number: `{value}`")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("observation {id}: {reason}")]
    InvalidObservation { id: usize, reason: String },

    #[error("unknown covariate cell {0}")]
    UnknownCell(CellKey),

    #[error("cell {cell}: no observations with instrument z={z}")]
    EmptyInstrumentArm { cell: CellKey, z: u8 },

    #[error("cell {cell}: propensity gap {gap:.4} below tolerance {tol}")]
    WeakInstrument { cell: CellKey, gap: f64, tol: f64 },

    #[error("cell {cell}: {reason}")]
    CellTooSmall { cell: CellKey, reason: String },

    #[error("cell {cell}: no candidate outcomes for arm {arm} within the support")]
    EmptyCandidateSet { cell: CellKey, arm: u8 },

    #[error("mismatched inputs: {0}")]
    Mismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("none of the {0} covariate cells could be estimated")]
    NoEstimableCell(usize),

    #[error("trimmed interval [{lo}, {hi}] is empty")]
    EmptyTrimmedInterval { lo: f64, hi: f64 },
}

impl Error {
    /// Short machine-readable tag, used in error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::EmptyInput => "empty_input",
            Error::MissingColumn(_) => "missing_column",
            Error::NonBinary { .. } => "non_binary",
            Error::NonNumeric { .. } => "non_numeric",
            Error::InvalidObservation { .. } => "invalid_observation",
            Error::UnknownCell(_) => "unknown_cell",
            Error::EmptyInstrumentArm { .. } => "empty_instrument_arm",
            Error::WeakInstrument { .. } => "weak_instrument",
            Error::CellTooSmall { .. } => "cell_too_small",
            Error::EmptyCandidateSet { .. } => "empty_candidate_set",
            Error::Mismatch(_) => "mismatch",
            Error::InvalidConfig(_) => "invalid_config",
            Error::NoEstimableCell(_) => "no_estimable_cell",
            Error::EmptyTrimmedInterval { .. } => "empty_trimmed_interval",
        }
    }
}
