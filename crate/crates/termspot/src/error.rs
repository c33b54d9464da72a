//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid: {cells} cells do not evenly divide {frames} frames")]
    InvalidGrid { frames: u32, cells: u32 },

    #[error("grid: center {center} outside [0, {total}]")]
    CenterOutOfRange { center: f64, total: u32 },

    #[error("invalid span [{start}, {end})")]
    InvalidSpan { start: f64, end: f64 },

    #[error("phoneme inventory is empty or contains duplicates")]
    InvalidInventory,

    #[error("empty phoneme sequence")]
    EmptyPhonemeSequence,

    #[error("unknown phoneme {0:?}")]
    UnknownPhoneme(String),

    #[error("embedding dimension {0} too small (minimum 8)")]
    EmbeddingDimTooSmall(usize),

    #[error("degenerate embedding: norm below 1e-12")]
    DegenerateEmbedding,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("zero-norm predicted embedding in cell {cell}: cosine undefined")]
    ZeroNormPrediction { cell: usize },

    #[error("non-positive duration {0}")]
    NonPositiveDuration(f64),

    #[error("loss weights must be non-negative with at least one positive")]
    InvalidLossWeights,

    #[error("forward state does not match parameters: {0}")]
    StaleForwardState(String),

    #[error("degenerate trial set: {0}")]
    DegenerateTrials(String),

    #[error("no positive trials")]
    NoPositiveTrials,

    #[error("no correctly detected instances at threshold {threshold} ({positives} positives)")]
    NoCorrectDetections { threshold: f64, positives: usize },

    #[error("term {term:?} has {targets} target and {non_targets} non-target trials; both must be nonzero")]
    TermMissingTrials {
        term: String,
        targets: usize,
        non_targets: usize,
    },

    #[error("corpus generation: {0}")]
    CorpusGeneration(String),

    #[error("unknown preset {0:?}; available: single_word, multi_word")]
    UnknownPreset(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("training aborted at epoch {epoch}: loss became non-finite")]
    NonFiniteLoss { epoch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
