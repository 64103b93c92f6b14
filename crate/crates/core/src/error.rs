use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("{0} is not Hurwitz (spectral abscissa {1:.3e})")]
    NotHurwitz(&'static str, f64),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("epsilon must be positive, got {0}")]
    NonpositiveEps(f64),
    #[error("{0} is not symmetric positive semidefinite (min eigenvalue {1:.3e})")]
    NotPsd(&'static str, f64),
    #[error("{0} is not positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("control channel Nx+B leaves range(C) (residual {0:.3e})")]
    RangeConditionViolated(f64),
    #[error("bilinear term N requires a scalar control, got {0} control columns")]
    BilinearMultiControl(usize),
    #[error("A22 is singular")]
    SingularA22,
    #[error("averaged driver is not quadratic in (x1, z): {0}")]
    NotRepresentable(String),
    #[error("horizon {horizon} is not an integral multiple of dt {dt}")]
    BadGrid { dt: f64, horizon: f64 },
    #[error("initial slow state lies outside the domain")]
    InitialStateOutsideDomain,
    #[error("degenerate design matrix at step {step} (rank {rank})")]
    DegenerateDesign { step: usize, rank: usize },
    #[error("Riccati step too coarse: halving changed the solution by {0:.3e}")]
    StepTooCoarse(f64),
    #[error("all exponential weights underflowed")]
    DegenerateExponential,
    #[error("duality representation needs N = 0 and B = C")]
    DualityPremise,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// Whether the error comes from the problem or its configuration rather
    /// than from a numerical breakdown during a run.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::SingularA22
                | Error::NotRepresentable(_)
                | Error::DegenerateDesign { .. }
                | Error::StepTooCoarse(_)
                | Error::DegenerateExponential
                | Error::NotPositiveDefinite(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dims(r: usize, c: usize) -> String {
    format!("{r}x{c}")
}
