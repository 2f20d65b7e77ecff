use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported resolution: {0}")]
    Resolution(String),

    #[error("fields are defined on different grids")]
    GridMismatch,

    #[error("unsupported Sobolev order {0} (expected 0, 1 or 2)")]
    SobolevOrder(u8),

    #[error("bump support intersects the boundary collar: {0}")]
    BumpSupport(String),

    #[error("conductivity violates the ellipticity floor: value {value} at node {node}")]
    EllipticityFloor { value: f64, node: usize },

    #[error("conductivity must equal 1 on the boundary: value {value} at node {node}")]
    BoundaryValue { value: f64, node: usize },

    #[error("iterative solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("insufficient spectrum: {0}")]
    InsufficientSpectrum(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("curve tracing failed: {0}")]
    Tracing(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Resolution(_) => "resolution",
            Error::GridMismatch => "grid_mismatch",
            Error::SobolevOrder(_) => "sobolev_order",
            Error::BumpSupport(_) => "bump_support",
            Error::EllipticityFloor { .. } => "ellipticity_floor",
            Error::BoundaryValue { .. } => "boundary_value",
            Error::NonConvergence { .. } => "non_convergence",
            Error::Singular(_) => "singular",
            Error::Degenerate(_) => "degenerate",
            Error::InsufficientSpectrum(_) => "insufficient_spectrum",
            Error::Precondition(_) => "precondition",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Tracing(_) => "tracing",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
