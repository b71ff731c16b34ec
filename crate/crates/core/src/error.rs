use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch { expected: (usize, usize), found: (usize, usize) },

    #[error("{pixels} pixel(s) outside the fidelity domain (u must be > 0)")]
    Domain { pixels: usize },

    #[error("singular linear system at iteration {iteration}: {detail}")]
    SingularSystem { iteration: usize, detail: String },

    #[error("lower-level solve did not converge ({iterations} iterations, relative residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("line search failed after {halvings} halvings (directional derivative {slope:e})")]
    LineSearch { halvings: usize, slope: f64 },

    #[error("direction is not a descent direction (slope {0:e})")]
    NotDescent(f64),

    #[error("corrupted quasi-Newton state: <Bs, s> = {0:e}")]
    CorruptState(f64),

    #[error("training pair {pair}, outer iteration {iteration}: {source}")]
    Pair {
        pair: usize,
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt image header: {0}")]
    CorruptHeader(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Is this a numerical failure (as opposed to bad input)?
    pub fn is_solver_failure(&self) -> bool {
        match self {
            Error::SingularSystem { .. }
            | Error::LineSearch { .. }
            | Error::NotDescent(_)
            | Error::CorruptState(_)
            | Error::Domain { .. }
            | Error::NotConverged { .. } => true,
            Error::Pair { source, .. } => source.is_solver_failure(),
            _ => false,
        }
    }
}
