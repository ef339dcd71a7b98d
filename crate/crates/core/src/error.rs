use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Invalid parameters, shapes or specs. Surfaces before any round runs.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    /// A client has no local samples and contributes nothing this round.
    #[error("client shard is empty")]
    EmptyShard,

    /// Nothing to aggregate; the previous global model is retained.
    #[error("no models to aggregate")]
    EmptyCohort,

    /// Every cohort member was excluded; the previous global model is retained.
    #[error("all {0} cohort members were excluded")]
    AllExcluded(usize),

    #[error("clustering is uninformative")]
    Uninformative,

    #[error("evaluation set is empty")]
    EmptyDataset,

    /// Every client is blacklisted; the simulation cannot continue.
    #[error("no selectable clients remain")]
    NoSelectableClients,
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for signals that leave the global model unchanged for the round
    /// instead of aborting the run.
    pub fn is_round_skip(&self) -> bool {
        matches!(self, Error::EmptyCohort | Error::AllExcluded(_))
    }
}
