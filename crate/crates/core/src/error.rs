use thiserror::Error;

/// Errors raised by the geometric, association, vanishing-point and
/// optimization routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid line: {0}")]
    InvalidLine(&'static str),
    #[error("invalid direction: zero-length vector")]
    InvalidDirection,
    #[error("anchor lies behind the camera (inverse depth {0})")]
    BehindCamera(f64),
    #[error("point behind the camera (depth {0})")]
    InvalidDepth(f64),
    #[error("degenerate line projection: l1^2 + l2^2 vanishes")]
    DegenerateProjection,
    #[error("invalid segment: endpoints coincide")]
    InvalidSegment,
    #[error("mean shift needs at least one direction")]
    NoCandidates,
    #[error("vanishing point refinement needs at least two segments, got {0}")]
    Underdetermined(usize),
    #[error("degenerate cluster: all segments lie on one line")]
    DegenerateCluster,
    #[error("inconsistent graph: {0}")]
    InconsistentGraph(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("scene has no visible observations")]
    EmptyScene,
    #[error("id mismatch: {0}")]
    Mismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
