use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("degenerate edit key: k^T C0^-1 k = {denominator:e}")]
    DegenerateKey { denominator: f64 },

    #[error("infeasible batch: {edits} equality constraints exceed key dimension {key_dim}")]
    InfeasibleBatch { edits: usize, key_dim: usize },

    #[error("edit keys are linearly dependent; dependent columns {dependent:?} (rank {rank} of {edits})")]
    RankDeficientKeys {
        dependent: Vec<usize>,
        rank: usize,
        edits: usize,
    },

    #[error("gradient descent diverged at step {step}")]
    Divergence { step: usize },

    #[error("value optimization made no progress: P(target) {initial:e} -> {final_prob:e}")]
    NoProgress { initial: f64, final_prob: f64 },

    #[error("non-finite activation at layer {layer}")]
    Numeric { layer: usize },

    #[error("layer {layer} out of range (model has {count} layers)")]
    LayerOutOfRange { layer: usize, count: usize },

    #[error("snapshot corrupted: expected hash {expected}, found {found}")]
    Corruption { expected: String, found: String },

    #[error("undefined score: all inputs must be positive, got {0:?}")]
    UndefinedScore([f64; 3]),

    #[error("singular KKT system at pivot {pivot} of {size}")]
    SingularKkt { pivot: usize, size: usize },

    #[error("layer {layer}: {source}")]
    AtLayer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("weight file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn at_layer(self, layer: usize) -> Self {
        Error::AtLayer {
            layer,
            source: Box::new(self),
        }
    }

    /// True for errors caused by the user's configuration rather than by
    /// the numerics.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Json(_))
    }
}
