use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("sigma * sigma^T is numerically singular (condition number {condition:e})")]
    SingularMatrix { condition: f64 },

    #[error("initial history does not cover [-delta, 0]: {0}")]
    MissingHistory(String),

    #[error("non-finite value encountered at step {step}, path {path}")]
    NonFinite { step: usize, path: usize },

    #[error("Riccati solution exceeded the blow-up threshold at t = {time}")]
    BlowUp { time: f64 },

    #[error("parameter constraint violated: {0}")]
    Constraint(String),

    #[error("regression design is rank deficient at step {step}")]
    RankDeficient { step: usize },

    #[error("Picard sweeps diverged: sup-change grew for two consecutive sweeps (sweep {sweep})")]
    PicardDivergence { sweep: usize },

    #[error("exponent overflow (max exponent {max_exponent})")]
    Overflow { max_exponent: f64 },

    #[error("market is incomplete: {assets} assets for {noises} Brownian motions")]
    IncompleteMarket { assets: usize, noises: usize },

    #[error("time {time} is outside [0, {horizon}]")]
    OutOfRange { time: f64, horizon: f64 },

    #[error("martingale estimate is not positive at step {step}, path {path}")]
    NonPositiveMartingale { step: usize, path: usize },

    #[error("stock volatility is zero")]
    ZeroVolatility,

    #[error("i/o failure: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
