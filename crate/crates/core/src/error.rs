use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A physical or numerical parameter is out of its valid range.
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid topology: {0}")]
    Topology(String),

    /// The continuous state matrix cannot be inverted reliably; the
    /// zero-order-hold formula needs `A^-1`.
    #[error("state matrix is singular or ill-conditioned (condition number {condition:.3e}); use Euler discretization instead")]
    SingularStateMatrix { condition: f64 },

    #[error("innovation covariance is singular (condition number {condition:.3e})")]
    SingularInnovation { condition: f64 },

    #[error("covariance `{name}` is not symmetric positive semidefinite: {reason}")]
    NotCovariance { name: String, reason: String },

    #[error("simulation diverged at t = {t:.6} s on channel `{channel}` (|x| = {value:.3e})")]
    Unstable { t: f64, channel: String, value: f64 },

    #[error("closed loop is not asymptotically stable (spectral radius {spectral_radius:.9})")]
    UnstableClosedLoop { spectral_radius: f64 },

    #[error("sample {index}: {source}")]
    AtSample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("trace misalignment: {0}")]
    Misaligned(String),

    #[error("rate {target} Hz does not divide source rate {source_rate} Hz")]
    RateNotDivisor { target: f64, source_rate: f64 },

    #[error("not enough data: {0}")]
    InsufficientData(String),

    #[error("config error in {path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("malformed {what}: {message}")]
    Parse { what: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn dims(
        context: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn at_sample(self, index: usize) -> Self {
        Error::AtSample {
            index,
            source: Box::new(self),
        }
    }

    /// True for errors caused by user-supplied input rather than by a failure
    /// during computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter { .. }
                | Error::Topology(_)
                | Error::NotCovariance { .. }
                | Error::Config { .. }
                | Error::Parse { .. }
                | Error::RateNotDivisor { .. }
        )
    }
}
