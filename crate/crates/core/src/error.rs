use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("sequence universe has {size} members, above the enumeration guard of {limit}")]
    UniverseTooLarge { size: u128, limit: u128 },

    #[error("corpus contains no sequences")]
    EmptyCorpus,

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),

    #[error("sequence does not belong to the space: {0}")]
    OutOfSpace(String),

    #[error("model order {order} is invalid for lmax {lmax} (must be in 1..=lmax+1)")]
    InvalidOrder { order: usize, lmax: usize },

    #[error("model is not trainable: {0}")]
    NotTrainable(String),

    #[error("model document schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("invalid constraint {id:?}: {reason}")]
    InvalidConstraint { id: String, reason: String },

    #[error("duplicate feature id {0:?}")]
    DuplicateFeatureId(String),

    #[error("constraint set has no pointwise constraints")]
    NoPointwiseConstraints,

    #[error("constraint set mixes pointwise and distributional constraints; use the exponential form")]
    MixedConstraints,

    #[error("constraint set has no distributional or hybrid constraints to fit")]
    NothingToFit,

    #[error("importance weights are degenerate (sum = {0})")]
    DegenerateWeights(f64),

    #[error("target {target} of constraint {id:?} lies outside the sampled feature range [{lo}, {hi}]")]
    UnattainableTarget { id: String, target: f64, lo: f64, hi: f64 },

    #[error("distribution has empty support (Z = 0)")]
    EmptySupport,

    #[error("proposal assigns zero probability to a sequence with positive target mass: {0}")]
    SupportViolation(String),

    #[error("partition function estimate must be positive, got {0}")]
    NonpositiveZ(f64),

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("no sample satisfied the predicate after drawing {drawn}")]
    NoAcceptedSamples { drawn: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
