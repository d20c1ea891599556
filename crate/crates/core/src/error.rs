use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("chain is not ergodic: {0}")]
    NonErgodic(String),

    /// A standing modelling assumption (full-rank A, positive definite C,
    /// full-rank features, connected graph) does not hold.
    #[error("assumption violated: {0}")]
    Assumption(String),

    #[error(
        "solution lies outside the primal ball (|x*| = {norm:.6e}, radius = {radius:.6e}); \
         enlarge the primal radius"
    )]
    OutsideDomain { norm: f64, radius: f64 },

    #[error("{what}: gave up after {attempts} attempts")]
    Exhausted { what: String, attempts: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
