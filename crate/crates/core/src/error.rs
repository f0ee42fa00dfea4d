use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("mesh has no faces")]
    EmptyMesh,
    #[error("face {face} references vertex {index}, but the mesh has {count} vertices")]
    FaceIndexOutOfRange { face: usize, index: usize, count: usize },
    #[error("requested {requested} samples but the mesh has only {available} vertices")]
    TooManySamples { requested: usize, available: usize },
    #[error("vertex {0} is not used by any face")]
    IsolatedVertex(usize),
    #[error("degenerate neighborhood around vertex {0}")]
    DegenerateNeighborhood(usize),
    #[error("degenerate covariance")]
    DegenerateCovariance,
    #[error("point lists have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("invalid bandwidth {0}: must be finite and positive")]
    InvalidBandwidth(f64),
    #[error("kernel row {0} vanished after truncation")]
    IsolatedRow(usize),
    #[error("eigensolver did not converge: {0}")]
    ConvergenceFailure(String),
    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("distance graph is disconnected")]
    DisconnectedGraph,
    #[error("mesh is disconnected ({0} components)")]
    DisconnectedMesh(usize),
    #[error("no correspondence map for surfaces {0} -> {1}")]
    MissingMap(usize, usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid resolution: {0}")]
    InvalidResolution(String),
    #[error("deformation flipped {0} triangles")]
    SelfIntersection(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
