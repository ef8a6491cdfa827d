use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::format::PartitionKind;
use crate::id::PalletId;
use crate::runner::RunReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },

    #[error("invalid pallet id {0:?}: expected 64 lowercase hex characters")]
    InvalidId(String),

    #[error("malformed pallet image: {0}")]
    Format(String),

    #[error("invalid path {path:?}: {reason}")]
    InvalidPath { path: String, reason: &'static str },

    #[error("invalid annotation: {0}")]
    Validation(String),

    #[error("cannot decode annotation: {0}")]
    Decode(String),

    #[error("image has no {0} partition")]
    PartitionNotFound(PartitionKind),

    #[error("pallet {0} not found")]
    MissingPallet(PalletId),

    #[error("pallet {id} failed verification: {detail}")]
    Tampered { id: PalletId, detail: String },

    #[error("corruption: {0}")]
    Corruption(String),

    #[error("extraction stopped after {} file(s): {source}", completed.len())]
    PartialExtract {
        completed: Vec<String>,
        #[source]
        source: io::Error,
    },

    #[error("capture failed: {0}")]
    Capture(String),

    #[error("hub: {0}")]
    Hub(String),

    #[error("invalid node spec: {0}")]
    InvalidSpec(String),

    #[error("node failed with exit code {}; workspace kept at {}", report.exit_code, quarantine.display())]
    NodeFailed {
        report: Box<RunReport>,
        quarantine: PathBuf,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for errors that mean stored bytes cannot be trusted.
    pub fn is_integrity(&self) -> bool {
        matches!(
            self,
            Error::Format(_) | Error::Tampered { .. } | Error::Corruption(_)
        )
    }
}

/// Attach a context string to an `io::Result`.
pub(crate) trait IoContext<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| Error::io(context(), source))
    }
}
