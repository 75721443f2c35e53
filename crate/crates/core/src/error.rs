use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid head configuration (n_h={n_h}, n_kv={n_kv}): {reason}")]
    InvalidHeads { n_h: u32, n_kv: u32, reason: &'static str },

    #[error("invalid model shape: {0}")]
    InvalidShape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model size {n_params:.6e} is below the supported floor {floor:.6e} (smallest anchor / 4)")]
    SizeBelowRange { n_params: f64, floor: f64 },

    #[error("model size {n_params:.6e} is above the supported ceiling {ceiling:.6e} (largest anchor x 4)")]
    SizeAboveRange { n_params: f64, ceiling: f64 },

    #[error("family table: {0}")]
    InvalidFamily(String),

    #[error("not enough records: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error(
        "records mix different training budgets in group(s) {groups:?}; pass the chinchilla-ratio tag to allow this"
    )]
    MixedTrainTokens { groups: Vec<String> },

    #[error("target loss {target} is not above the asymptote {asymptote} (gap {gap:.6e})")]
    InfeasibleTarget { target: f64, asymptote: f64, gap: f64 },

    #[error("no candidate reaches target loss {target}: smallest gap to an asymptote is {gap:.6e}, minimum achievable loss is above {min_loss}")]
    AllInfeasible { target: f64, gap: f64, min_loss: f64 },

    #[error("no curves supplied")]
    NoCurves,

    #[error("series have no context length in common")]
    EmptyOverlap,

    #[error("cost evaluation produced a non-finite value")]
    NonFinite,

    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: u64, msg: String },

    #[error("{}: no records", path.display())]
    NoRecords { path: PathBuf },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
