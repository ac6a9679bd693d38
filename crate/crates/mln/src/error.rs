//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MlnError {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("degenerate input: vector norm {norm:.3e} below epsilon {eps:.3e}")]
    DegenerateVector { norm: f64, eps: f64 },

    #[error("class slot {slot} has no support embeddings")]
    EmptyClassSlot { slot: usize },

    #[error("label {label} out of range for {len} logits")]
    LabelOutOfRange { label: usize, len: usize },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("backward pass requires a scalar root, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("episode sampling failed: {0}")]
    Sampling(String),

    #[error("dataset format error: {0}")]
    Format(String),

    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("training diverged at episode {episode}: loss is not finite")]
    Diverged { episode: u64 },

    #[error("reference bank has {n_ref} rows but episode needs {way}")]
    BankTooSmall { n_ref: usize, way: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MlnError>;
