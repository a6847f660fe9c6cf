use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {index} out of range for extent {extent}")]
    Index { index: usize, extent: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid config `{field}`: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("no negatives: every feature carries label {0}")]
    NoNegatives(usize),

    #[error("no positive partner for the single feature labelled {0}")]
    NoPositivePartner(usize),

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("finite-difference oracle: {0}")]
    Oracle(String),

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config {
            field,
            reason: reason.into(),
        }
    }

    /// Attach the sampler step index to an error.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            e @ Error::AtStep { .. } => e,
            e => Error::AtStep {
                step,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, with step context stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            e => e,
        }
    }

    /// Whether this error stems from invalid configuration rather than numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self.root(),
            Error::Config { .. }
                | Error::Index { .. }
                | Error::NoNegatives(_)
                | Error::NoPositivePartner(_)
        )
    }
}
