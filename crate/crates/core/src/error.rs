use thiserror::Error;

pub type Result<T, E = KpcError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum KpcError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("data rows {first} and {second} coincide (scaled squared distance {dist:.3e})")]
    DuplicateData { first: usize, second: usize, dist: f64 },

    #[error("gram matrix is not positive definite after jitter")]
    IllConditionedGram,

    #[error("gamma {gamma:.6e} too small: noise-consistent interpolant norm is {required:.6e}")]
    GammaTooSmall { gamma: f64, required: f64 },

    #[error("delta QP did not converge: projected-gradient norm {pg_norm:.3e} after {iterations} iterations")]
    DeltaNonconvergence { pg_norm: f64, iterations: usize },

    #[error("fit of model (step {step}, dim {dim}) failed: {source}")]
    Fit {
        step: usize,
        dim: usize,
        #[source]
        source: Box<KpcError>,
    },

    #[error("box is empty in dimension {dim}")]
    EmptyBox { dim: usize },

    #[error("box intersection is empty in dimension {dim}")]
    EmptyIntersection { dim: usize },

    #[error("malformed closed-loop history: {0}")]
    History(String),

    #[error("simulation diverged: {0}")]
    Divergence(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema version mismatch in {what}: found {found}, expected {expected}")]
    SchemaVersion {
        what: String,
        found: u32,
        expected: u32,
    },

    #[error("persisted data inconsistent: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl KpcError {
    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        KpcError::DimensionMismatch {
            context,
            expected,
            got,
        }
    }
}
