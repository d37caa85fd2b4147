use thiserror::Error;

/// Errors produced by graph loading, chain computations and optimization.
#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {path}: {message}")]
    Parse { path: String, message: String },

    #[error("asymmetric sizes: {0}")]
    AsymmetricSizes(String),

    #[error("zero row: node {0} has no outgoing edge")]
    ZeroRow(usize),

    #[error("disconnected: the graph is not strongly connected")]
    Disconnected,

    #[error("non-integer weight at ({0}, {1})")]
    NonIntegerWeight(usize, usize),

    #[error("invalid weight at ({0}, {1}): edges require an integer travel time >= 1")]
    InvalidWeight(usize, usize),

    #[error("invalid adjacency entry at ({0}, {1}): entries must be 0 or 1")]
    InvalidAdjacency(usize, usize),

    #[error("invalid target distribution: {0}")]
    InvalidDistribution(String),

    #[error("degenerate row: row {0} of |Q ∘ A| sums below 1e-30")]
    DegenerateRow(usize),

    #[error("reducible chain: {0}")]
    ReducibleChain(String),

    #[error("not a transition matrix: {0}")]
    InvalidTransitionMatrix(String),

    #[error("horizon too small: need {needed} hitting-probability slices, have {have}")]
    HorizonTooSmall { needed: usize, have: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid objective spec: {0}")]
    InvalidSpec(String),

    #[error("non-finite value in primitive `{0}`")]
    NonFinite(&'static str),

    #[error("budget below node count: budget {budget} < {nodes} nodes")]
    BudgetBelowNodeCount { budget: u32, nodes: usize },

    #[error("all optimization runs failed")]
    AllRunsFailed,
}

pub type Result<T> = std::result::Result<T, Error>;
