//! The key distribution arbiter: owns the ledger of key ranges, hands them to
//! agents, verifies claimed keys, reclaims abandoned ranges and journals every
//! transition.

mod job;
mod journal;
mod ledger;
mod server;

use std::fs::File;
use std::io;
use std::path::Path;
use std::time::Instant;

use thiserror::Error;

pub use job::{
    JobConfig, JobConfigRecord, Strategy, DEFAULT_LEASE_TIMEOUT, DEFAULT_PROGRESS_INTERVAL,
};
pub use journal::{read_journal, Journal, JournalRecord, JournalScan};
pub use ledger::{
    Assignment, AssignmentState, Ledger, LedgerEvent, LedgerStatus, Outbound, Outcome, Recipient,
    ReleaseReason,
};
pub use server::{serve, spawn, CoordinatorHandle, ServeExit, ServeOptions, ServeReport};

#[derive(Debug, Error)]
pub enum CoordinatorError {
    #[error("invalid job configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown job {0:?}")]
    UnknownJob(String),
    #[error("job {job_id:?} is not held by agent {agent_id:?}")]
    NotOwner { job_id: String, agent_id: String },
    #[error("invalid key: {0}")]
    InvalidKey(String),
    #[error("claimed key {0} does not decrypt every known pair")]
    ClaimRejected(String),
    #[error("journal write failed: {0}")]
    Journal(#[source] io::Error),
    #[error("journal unusable: {0}")]
    CorruptJournal(String),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

impl CoordinatorError {
    /// Error code sent to the agent in an `error` message.
    pub fn wire_code(&self) -> &'static str {
        match self {
            CoordinatorError::InvalidConfig(_) => "invalid_config",
            CoordinatorError::UnknownJob(_) => "unknown_job",
            CoordinatorError::NotOwner { .. } => "not_owner",
            CoordinatorError::InvalidKey(_) => "invalid_key",
            CoordinatorError::ClaimRejected(_) => "claim_rejected",
            CoordinatorError::Journal(_) | CoordinatorError::CorruptJournal(_) => "journal",
            CoordinatorError::Io(_) => "io",
        }
    }

    /// Errors that end the coordinator rather than a single request.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            CoordinatorError::Journal(_) | CoordinatorError::CorruptJournal(_) | CoordinatorError::Io(_)
        )
    }
}

/// What [`recover`] found in a journal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recovery {
    pub records_applied: usize,
    /// Records dropped: torn, unparseable, or not applicable.
    pub records_dropped: usize,
}

/// Rebuilds the ledger from the journal at `path`, cuts the file back to the
/// records that applied, and keeps journaling to it. Assignments active at the
/// time of the crash are released at their checkpoints.
pub fn recover(path: impl AsRef<Path>) -> Result<(Ledger, Recovery), CoordinatorError> {
    let path = path.as_ref();
    let scan = read_journal(File::open(path)?)?;
    let total = scan.records.len();
    let (mut ledger, applied) = Ledger::journal_replay(scan.records)?;
    let keep = scan.ends[applied - 1];
    let dropped = total - applied + usize::from(scan.truncated);
    ledger.resume_journal(Journal::reopen(path, keep)?, Instant::now())?;
    Ok((
        ledger,
        Recovery {
            records_applied: applied,
            records_dropped: dropped,
        },
    ))
}
