use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("vocab too small: max_vocab {max_vocab} cannot hold the {specials} special tokens")]
    VocabTooSmall { max_vocab: usize, specials: usize },

    #[error("corpus too short: no document holds a full sequence of {seq_len} tokens")]
    CorpusTooShort { seq_len: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {left:?} vs {right:?} ({context})")]
    ShapeMismatch {
        left: Vec<usize>,
        right: Vec<usize>,
        context: &'static str,
    },

    #[error("no scorable positions")]
    NoScorablePositions,

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("non-finite loss during gradient check")]
    NonFiniteGradCheck,

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("rank of X is {rank}, below the requested dimension {requested}")]
    RankDeficient { rank: usize, requested: usize },

    #[error("ICA diverged at iteration {iteration} (update norm {norm})")]
    IcaDiverged { iteration: usize, norm: f64 },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown POS tag {0:?}")]
    UnknownTag(String),

    #[error("not a twintower checkpoint")]
    BadMagic,

    #[error("unsupported {what} version: found {found}, expected {expected}")]
    UnsupportedVersion {
        what: &'static str,
        found: String,
        expected: String,
    },

    #[error("truncated checkpoint: {0}")]
    Truncated(String),

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("tower order is not set; run order_towers first")]
    TowersNotOrdered,

    #[error("checkpoint has no phase-2 heads")]
    MissingHeads,

    #[error("empty evaluation stream")]
    EmptyEvalStream,

    #[error(transparent)]
    Io(#[from] io::Error),
}
