use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke a documented precondition (shapes, ranges, empty input).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unknown character {0:?} is not in the vocabulary")]
    UnknownChar(char),

    #[error("training diverged at step {step}: {detail}")]
    TrainingDiverged { step: usize, detail: String },

    #[error("fitting failed at step {step}: {detail}")]
    FitDiverged { step: usize, detail: String },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        // Negated so that NaN comparisons fail the contract.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use contract;
