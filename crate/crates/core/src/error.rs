use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value for {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("improper transfer function: numerator degree {num} exceeds denominator degree {den}")]
    Improper { num: usize, den: usize },

    #[error("delay {delay} s is not an integer multiple of the sample period {period} s")]
    NonIntegerDelay { delay: f64, period: f64 },

    #[error("no gain crossover in band {lo:e}..{hi:e} rad/s")]
    NoCrossover { lo: f64, hi: f64 },

    #[error("record at {frequency} Hz holds {periods:.2} periods, at least 3 are required")]
    RecordTooShort { frequency: f64, periods: f64 },

    #[error("input phasor at {0} Hz is zero")]
    ZeroInputPhasor(f64),

    #[error("fit did not converge after {iterations} iterations (best cost {cost:e}, params {best:?})")]
    NotConverged {
        iterations: usize,
        cost: f64,
        best: Vec<f64>,
    },

    #[error("rank-deficient regressor: operators {0:?} are collinear with earlier columns")]
    RankDeficient(Vec<usize>),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of a numerical procedure, as opposed to bad input or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NoCrossover { .. }
                | Error::NotConverged { .. }
                | Error::RankDeficient(_)
                | Error::ZeroInputPhasor(_)
        )
    }
}

pub(crate) fn finite(x: f64, what: &'static str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(what))
    }
}
