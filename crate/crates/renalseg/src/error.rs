//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by any module in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}: bad magic (not a NIfTI-1 file)")]
    BadMagic { path: PathBuf },

    #[error("{path}: unsupported NIfTI datatype code {code}")]
    UnsupportedDatatype { path: PathBuf, code: i16 },

    #[error("{path}: {reason}")]
    MalformedNifti { path: PathBuf, reason: String },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("label value {value} outside the supported range 0..=3")]
    LabelOutOfRange { value: i64 },

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty foreground: no nonzero voxels to bound")]
    EmptyForeground,

    #[error("invalid class map: {0}")]
    InvalidClassMap(String),

    #[error("label {value} not covered by the class map")]
    LabelNotInClassMap { value: u8 },

    #[error("predictor error: {0}")]
    Predictor(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("phantom placement infeasible: {0}")]
    PlacementInfeasible(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("yaml error: {0}")]
    Yaml(#[from] serde_yaml::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
