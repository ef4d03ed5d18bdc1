use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("kernel is singular at u = {at}: {hint}")]
    Singularity { at: f64, hint: String },

    #[error("tail integral diverges: {0}")]
    Divergent(String),

    #[error("kernel is not Lipschitz: {0}")]
    NotLipschitz(String),

    #[error("CFL condition violated: dt = {dt}, dx = {dx}, lambda = dt/dx = {lambda} > 1")]
    Cfl { dt: f64, dx: f64, lambda: f64 },

    #[error("length mismatch: {0}")]
    Misaligned(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("quadrature did not converge: estimate {value}, error {error}")]
    Quadrature { value: f64, error: f64 },

    /// `line` is 1-based; 0 means the problem is not tied to a line.
    #[error("config{}: {message}", at_line(.line))]
    Config { line: usize, message: String },

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn at_line(line: &usize) -> String {
    if *line == 0 {
        String::new()
    } else {
        format!(" line {line}")
    }
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
