//! Shared, timestamped event log for coordinator and agents running in one process.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TimelineEvent {
    Assigned {
        job_id: String,
        agent_id: String,
        first_key: String,
        last_key: String,
    },
    Parked {
        agent_id: String,
    },
    Exhausted {
        job_id: String,
        agent_id: String,
    },
    Released {
        job_id: String,
        agent_id: Option<String>,
        reason: String,
        requeued: Option<String>,
    },
    ClaimRejected {
        job_id: String,
        agent_id: String,
        key: String,
    },
    Found {
        job_id: String,
        agent_id: String,
        key: String,
    },
    Finished {
        outcome: String,
    },
    AgentKilled {
        agent_id: String,
        keys_tried: u64,
    },
    AgentExited {
        agent_id: String,
        reason: String,
    },
    CoordinatorStopped {
        how: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimelineEntry {
    pub at_ms: f64,
    #[serde(flatten)]
    pub event: TimelineEvent,
}

#[derive(Debug, Clone)]
pub struct Timeline {
    origin: Instant,
    entries: Arc<Mutex<Vec<TimelineEntry>>>,
}

impl Default for Timeline {
    fn default() -> Self {
        Self::new()
    }
}

impl Timeline {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
            entries: Arc::default(),
        }
    }

    pub fn origin(&self) -> Instant {
        self.origin
    }

    pub fn push(&self, event: TimelineEvent) {
        let at_ms = self.origin.elapsed().as_secs_f64() * 1e3;
        self.entries.lock().unwrap().push(TimelineEntry { at_ms, event });
    }

    pub fn snapshot(&self) -> Vec<TimelineEntry> {
        self.entries.lock().unwrap().clone()
    }

    /// Polls until an entry satisfies `pred` or `timeout` passes.
    pub fn wait_for(&self, timeout: Duration, pred: impl Fn(&TimelineEvent) -> bool) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if self.entries.lock().unwrap().iter().any(|e| pred(&e.event)) {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            std::thread::sleep(Duration::from_millis(1));
        }
    }
}
