use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cycle detected: {}", format_cycle(.0))]
    CycleDetected(Vec<usize>),
    #[error("duplicate edge {0} -> {1}")]
    DuplicateEdge(usize, usize),
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("node {node} out of range for graph with {n} nodes")]
    OutOfRangeNode { node: usize, n: usize },
    #[error("feature matrix has {got} rows, expected {expected}")]
    FeatureShapeMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFiniteInput(&'static str),
    #[error("line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("teleport probability must lie in (0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error("singular system in {0}")]
    Singular(&'static str),
    #[error("no adjoint registered for primitive `{0}`")]
    UnregisteredPrimitive(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    DivergenceDetected {
        epoch: usize,
        loss: f64,
        /// Parameters at the moment the non-finite loss was observed.
        state: Box<crate::attention::TransformerStack>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_cycle(nodes: &[usize]) -> String {
    nodes
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" -> ")
}

pub type Result<T> = std::result::Result<T, Error>;
