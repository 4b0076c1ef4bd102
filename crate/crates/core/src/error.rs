use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid offspring law: {0}")]
    InvalidLaw(String),
    #[error("degenerate offspring law: mean offspring is zero at x = {0}")]
    DegenerateLaw(f64),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("principal eigenvalue {lambda1} is not negative, so the system does not grow")]
    Subcritical { lambda1: f64 },
    #[error("{what} is outside the domain: {value}")]
    OutOfDomain { what: &'static str, value: f64 },
    #[error("population cap of {cap} particles exceeded")]
    Capacity { cap: usize },
    #[error("time {t} is outside the observed window or was not recorded")]
    TimeNotObserved { t: f64 },
    #[error("eigensolver did not converge after {iterations} iterations (last change {last_change:e})")]
    NoConvergence { iterations: usize, last_change: f64 },
    #[error("kernel table needs at least {required} modes, only {available} available")]
    InsufficientModes { required: usize, available: usize },
    #[error("unsupported: {0}")]
    Unsupported(String),
}
