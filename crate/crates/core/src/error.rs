use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("matrix is not PSD: min eigenvalue {min_eigenvalue:e} below -{tolerance:e}")]
    NotPsd { min_eigenvalue: f64, tolerance: f64 },

    #[error("singular {dim}x{dim} system")]
    Singular { dim: usize },

    #[error("degenerate optimizer state: {0}")]
    Degenerate(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("rank-deficient channel matrix: users {users:?} are linearly dependent on the others")]
    RankDeficient { users: Vec<usize> },

    #[error("internal consistency failure: {0}")]
    Consistency(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerics as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPsd { .. }
                | Error::Singular { .. }
                | Error::Degenerate(_)
                | Error::Numerical(_)
                | Error::RankDeficient { .. }
                | Error::Consistency(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
