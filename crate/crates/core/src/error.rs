use thiserror::Error;

/// Errors raised anywhere in the planning stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("direction must be a unit vector (norm {0})")]
    InvalidDirection(f64),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("{what} did not converge after {iterations} iterations (best estimate {estimate})")]
    NumericalFailure {
        what: &'static str,
        iterations: usize,
        estimate: f64,
    },
    #[error("argument out of domain: {0}")]
    Domain(String),
    #[error("chi-squared quantile at p = 1 is infinite")]
    InfiniteQuantile,
    #[error("risk gradient undefined: {0}")]
    GradientUndefined(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("link index {0} out of range")]
    InvalidLink(usize),
    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),
    #[error("invalid robot model: {0}")]
    InvalidRobot(String),
    #[error("geometry failure at waypoint {waypoint}, obstacle {obstacle}, link {link}: {source}")]
    RiskContext {
        waypoint: usize,
        obstacle: usize,
        link: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("quadratic program: {0}")]
    Qp(String),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("unsupported scenario version: {0}")]
    UnsupportedVersion(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }
}
