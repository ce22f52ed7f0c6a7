use num_complex::Complex64;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch { context: &'static str, expected: usize, found: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("forward Euler step dt_inner = {dt_inner:e} exceeds the stability bound h^2/2 = {bound:e}")]
    UnstableStep { dt_inner: f64, bound: f64 },

    #[error("no steady state for lambda = {lambda} (saddle-node at {critical})")]
    NoSteadyState { lambda: f64, critical: f64 },

    #[error("root not bracketed on [{lo}, {hi}]")]
    NotBracketed { lo: f64, hi: f64 },

    #[error("rank collapse: {0}")]
    RankCollapse(String),

    #[error("newton iteration failed ({reason}) after {iterations} steps, residual {residual:e}")]
    NewtonFailed { reason: &'static str, iterations: usize, residual: f64 },

    #[error("pair (F, D) is not stabilizable: eigenvalue {eigenvalue} is uncontrollable")]
    NotStabilizable { eigenvalue: Complex64 },

    #[error("pole {pole} cannot be assigned: eigenvalue {eigenvalue} of F is uncontrollable")]
    Uncontrollable { pole: Complex64, eigenvalue: Complex64 },

    #[error("riccati iteration diverged: ||P|| = {norm:e} after {iterations} iterations")]
    RiccatiDiverged { norm: f64, iterations: usize },

    #[error("closed loop is not stable: spectral radius {radius}")]
    UnstableClosedLoop { radius: f64 },

    #[error("ill-conditioned {what}: condition number {cond:e}")]
    IllConditioned { what: &'static str, cond: f64 },

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("schema version mismatch: expected {expected}, found {found}")]
    Schema { expected: u32, found: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed {what}: {message}")]
    Format { what: String, message: String },
}

impl Error {
    /// True for errors that come from reading or writing artifacts rather than numerics.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Schema { .. } | Error::Format { .. })
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
