use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// Every variant knows which module produced it, see [`Error::module`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry at {path}: {message}")]
    Geometry { path: String, message: String },

    #[error("mesh generation failed: {0}")]
    Mesh(String),

    #[error("degenerate element {element} (measure {measure:e})")]
    DegenerateElement { element: usize, measure: f64 },

    #[error("unmatched periodic vertices: {coords:?}")]
    UnmatchedPeriodic { coords: Vec<Vec<f64>> },

    #[error("factorization of K - {shift} M broke down: {reason}")]
    Factorization { shift: f64, reason: String },

    #[error("eigensolver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("lambda = {lambda} is within the pole guard of lambda_j = {pole}")]
    PoleProximity { lambda: f64, pole: f64 },

    #[error("series tail bound {bound:e} exceeds {tolerance:e} at lambda = {lambda}")]
    TailBound { lambda: f64, bound: f64, tolerance: f64 },

    #[error("lambda = {lambda} is not in a gap (beta = {beta})")]
    OutOfGap { lambda: f64, beta: f64 },

    #[error("homogenization failed: {0}")]
    Homogenization(String),

    #[error("pencil root search stagnated: {0}")]
    Stagnation(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Name of the library module the error originates from.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Geometry { .. } => "geometry",
            Error::Mesh(_)
            | Error::DegenerateElement { .. }
            | Error::UnmatchedPeriodic { .. }
            | Error::Factorization { .. }
            | Error::NoConvergence { .. } => "fem-kernel",
            Error::PoleProximity { .. } | Error::TailBound { .. } => "beta-function",
            Error::OutOfGap { .. } | Error::Stagnation(_) => "defect-eigensolver",
            Error::Homogenization(_) => "cell-homogenizer",
            Error::InvalidArgument(_) => "arguments",
            Error::Config { .. } => "cli",
            Error::Io(_) => "io",
        }
    }

    /// True for configuration and validation failures (as opposed to numerical ones).
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::Geometry { .. })
    }

    pub(crate) fn geometry(path: &str, message: impl Into<String>) -> Self {
        Error::Geometry {
            path: path.to_string(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
