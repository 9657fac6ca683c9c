use std::path::PathBuf;

/// Errors raised by the estimation, stability and experiment code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite coordinate at flat index {0}")]
    NonFinite(usize),

    #[error("dataset needs at least {required} observations, got {found}")]
    TooFewObservations { required: usize, found: usize },

    #[error("degenerate design: x-values have zero spread")]
    DegenerateDesign,

    #[error("loss is not differentiable at this point (|residual| = {0:e})")]
    NonDifferentiable(f64),

    #[error("every probe landed on a non-differentiable point ({0} attempts)")]
    InsufficientProbes(usize),

    #[error("no sampled dataset fell inside the restriction set ({reps} reps)")]
    RestrictionTooSmall { reps: usize },

    #[error("fold {fold} failed: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("repetition (n = {n}, rep = {rep}) failed: {source}")]
    Repetition {
        n: usize,
        rep: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn in_fold(self, fold: usize) -> Self {
        Error::Fold {
            fold,
            source: Box::new(self),
        }
    }

    /// True for errors caused by user input rather than runtime failures.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) => true,
            Error::Repetition { source, .. } | Error::Fold { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
