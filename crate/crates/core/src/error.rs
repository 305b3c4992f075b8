use thiserror::Error;

/// Errors raised by the geometry, simulation, bound and estimation layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("points coincide (separation {separation:.3e} m)")]
    CoincidentPoints { separation: f64 },

    #[error("direction vector is not unit norm (norm = {norm})")]
    NotUnit { norm: f64 },

    #[error("number of transmissions must be even, got {0}")]
    OddT(usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("Fisher information is singular (condition number {condition:.3e})")]
    SingularFim { condition: f64 },

    #[error("reduced constrained FIM is singular (condition number {condition:.3e})")]
    SingularReducedFim { condition: f64 },

    #[error("weak signal: dictionary peak {peak:.3e} below {threshold:.3e}")]
    WeakSignal { peak: f64, threshold: f64 },

    #[error("degenerate triangle: law-of-sines denominator {denominator:.3e}")]
    DegenerateTriangle { denominator: f64 },

    #[error("direction vectors are parallel; rotation is not identifiable")]
    DegenerateDirections,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("malformed file: {0}")]
    Format(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
