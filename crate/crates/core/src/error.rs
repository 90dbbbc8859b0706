use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad arguments or an inconsistent configuration.
    Config,
    /// Unreadable, malformed or incomplete input data.
    Data,
    /// A model fit or estimator failed numerically.
    Fit,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("formula syntax error: {0}")]
    FormulaSyntax(String),
    #[error("unsupported term function `{0}` (only factor() is supported)")]
    UnsupportedFunction(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("missing value in covariate `{column}` (row {row})")]
    MissingValue { column: String, row: usize },
    #[error("non-numeric value `{value}` in column `{column}` (row {row})")]
    NonNumeric { column: String, row: usize, value: String },
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("model did not converge after {iterations} iterations (possible separation)")]
    NotConverged { iterations: usize },
    #[error("rank-deficient design matrix (min/max eigenvalue ratio {ratio:.3e})")]
    RankDeficient { ratio: f64 },
    #[error("zero total weight in group `{0}`")]
    ZeroWeight(String),
    #[error("empty group `{0}`")]
    EmptyGroup(String),
    #[error("outcome outside the domain of the requested scale: {0}")]
    Domain(String),
    #[error("singular estimating-equation Jacobian (reciprocal condition {rcond:.3e})")]
    SingularJacobian { rcond: f64 },
    #[error("bootstrap aborted: {failed} of {total} replicates failed")]
    Bootstrap { failed: usize, total: usize },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::FormulaSyntax(_) | Error::UnsupportedFunction(_) | Error::InvalidArgument(_) => {
                ErrorKind::Config
            }
            Error::MissingColumn(_)
            | Error::MissingValue { .. }
            | Error::NonNumeric { .. }
            | Error::DegenerateDesign(_)
            | Error::InvalidData(_)
            | Error::Io(_)
            | Error::Csv(_) => ErrorKind::Data,
            Error::NotConverged { .. }
            | Error::RankDeficient { .. }
            | Error::ZeroWeight(_)
            | Error::EmptyGroup(_)
            | Error::Domain(_)
            | Error::SingularJacobian { .. }
            | Error::Bootstrap { .. } => ErrorKind::Fit,
        }
    }
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
