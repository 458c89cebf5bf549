use thiserror::Error;

use crate::sdp::SolveStatus;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("solver finished with status {status:?} ({context})")]
    Solver { status: SolveStatus, context: String },

    #[error("constraint polytope is empty: {0}")]
    Infeasible(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Solver status carried by this error, looking through stage labels.
    pub fn solver_status(&self) -> Option<SolveStatus> {
        match self {
            Error::Solver { status, .. } => Some(*status),
            Error::Stage { source, .. } => source.solver_status(),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
