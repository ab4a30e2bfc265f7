use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("infeasible stream: {0}")]
    InfeasibleStream(String),
    #[error("undefined mixture: no traffic at {0}")]
    UndefinedMixture(String),
    #[error("unstable queue: rho={rho} at {at}")]
    Unstable { rho: f64, at: String },
    #[error("bound undefined: {0}")]
    BoundUndefined(String),
    #[error("infeasible instance: {0}")]
    InfeasibleInstance(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("unknown baseline: {0}")]
    UnknownBaseline(String),
    #[error("workload spec error: {0}")]
    Spec(String),
    #[error("parse error in {file} at {location}: {message}")]
    Parse {
        file: String,
        location: String,
        message: String,
    },
    #[error("io error: {0}")]
    Io(String),
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// Stable machine-readable kind, used by the command-line error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::InvalidInput(_) => "invalid_input",
            Error::InfeasibleStream(_) => "infeasible_stream",
            Error::UndefinedMixture(_) => "undefined_mixture",
            Error::Unstable { .. } => "unstable",
            Error::BoundUndefined(_) => "bound_undefined",
            Error::InfeasibleInstance(_) => "infeasible_instance",
            Error::Domain(_) => "domain",
            Error::Capacity(_) => "capacity",
            Error::UnknownBaseline(_) => "unknown_baseline",
            Error::Spec(_) => "workload_spec",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Config(_) => "config",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
