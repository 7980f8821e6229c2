use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("insufficient samples for quantile: eps * M = {eps_m} < 1")]
    InsufficientSamples { eps_m: f64 },

    #[error("no feasible backoff: Phi^-1(1 - delta) * sigma / x = {margin} >= 1")]
    NoFeasibleBackoff { margin: f64 },

    #[error("coherence radius exceeds cell (searched up to {searched_m} m)")]
    CoherenceRadiusExceedsCell { searched_m: f64 },

    #[error("coherence radius exceeds map (searched up to {searched_m} m)")]
    CoherenceRadiusExceedsMap { searched_m: f64 },

    #[error("quadrature did not converge: estimate {estimate}, error {error_estimate}, {intervals} intervals")]
    Quadrature {
        estimate: f64,
        error_estimate: f64,
        intervals: usize,
    },

    #[error("singular nuisance block (condition number {condition:e})")]
    SingularNuisance { condition: f64 },

    #[error("localization unobservable (condition number {condition:e})")]
    Unobservable { condition: f64 },

    #[error("singular geometry: {0}")]
    SingularGeometry(String),

    #[error("too many singular draws: {skipped} of {total}")]
    TooManySkipped { skipped: usize, total: usize },

    #[error("estimated location ({x}, {y}) is outside the map")]
    OutOfMap { x: f64, y: f64 },

    #[error("padding insufficient: localization support {needed} exceeds map extent {available}")]
    PaddingInsufficient { needed: String, available: String },

    #[error("calibration infeasible for {family}: conservative-end max meta-probability {conservative_meta} > delta {delta}")]
    Infeasible {
        family: String,
        conservative_meta: f64,
        delta: f64,
    },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("corrupt input: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
