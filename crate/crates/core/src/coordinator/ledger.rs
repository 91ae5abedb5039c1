use std::collections::{HashMap, HashSet, VecDeque};
use std::time::Instant;

use log::{debug, info, warn};
use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::Zero;

use super::job::{JobConfig, Strategy};
use super::journal::{Journal, JournalRecord};
use super::CoordinatorError;
use crate::cipher::CipherSpec;
use crate::keyspace::{partition, space_size, KeyRange, KeyValue};
use crate::protocol::{Message, StopReason};

type Result<T> = std::result::Result<T, CoordinatorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AssignmentState {
    Unassigned,
    Active,
    Exhausted,
    Found,
}

#[derive(Debug, Clone)]
pub struct Assignment {
    pub job_id: String,
    pub range: KeyRange,
    pub agent_id: Option<String>,
    pub state: AssignmentState,
    /// Highest key such that every key from `range.first()` through it has been tried.
    pub checkpoint: Option<KeyValue>,
    pub keys_tried: u64,
    pub last_heard: Option<Instant>,
}

impl Assignment {
    fn new(job_id: String, range: KeyRange) -> Self {
        Self {
            job_id,
            range,
            agent_id: None,
            state: AssignmentState::Unassigned,
            checkpoint: None,
            keys_tried: 0,
            last_heard: None,
        }
    }

    fn searched(&self) -> BigUint {
        match self.state {
            AssignmentState::Exhausted => self.range.size(),
            AssignmentState::Unassigned => BigUint::zero(),
            AssignmentState::Active | AssignmentState::Found => match &self.checkpoint {
                Some(c) => c.magnitude() - self.range.first().magnitude() + 1u32,
                None => BigUint::zero(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Found(KeyValue),
    NotFound,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Recipient {
    Agent(String),
    All,
}

/// A message the server must deliver on the ledger's behalf.
#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub to: Recipient,
    pub message: Message,
}

impl Outbound {
    fn to_agent(agent_id: &str, message: Message) -> Self {
        Self {
            to: Recipient::Agent(agent_id.to_string()),
            message,
        }
    }

    fn broadcast(message: Message) -> Self {
        Self {
            to: Recipient::All,
            message,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReleaseReason {
    LeaseExpired,
    Disconnected,
    Rehello,
    Restart,
}

/// Observable ledger transitions, drained by the server for logs and timelines.
#[derive(Debug, Clone, PartialEq)]
pub enum LedgerEvent {
    Activated {
        job_id: String,
        agent_id: String,
        range: KeyRange,
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
        reason: ReleaseReason,
        requeued: Option<KeyRange>,
    },
    ClaimRejected {
        job_id: String,
        agent_id: String,
        key: String,
    },
    Found {
        job_id: String,
        agent_id: String,
        key: KeyValue,
    },
    Finished(Outcome),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerStatus {
    pub total_keys: BigUint,
    pub searched_keys: BigUint,
    pub active: usize,
    pub unassigned: usize,
    pub exhausted: usize,
    pub outcome: Option<Outcome>,
}

/// The arbiter's record of who owns which part of the key space.
///
/// Every method is a synchronous state transition; the server serializes calls
/// through one owner thread. Ranges of all assignments plus the not-yet-carved
/// chunk tail always partition `[0, 2^u - 1]`.
#[derive(Debug)]
pub struct Ledger {
    config: JobConfig,
    cipher: CipherSpec,
    assignments: Vec<Assignment>,
    index: HashMap<String, usize>,
    /// Chunked mode: the part of the space not yet cut into chunks.
    unissued: Option<KeyRange>,
    next_id: u64,
    result: Option<KeyValue>,
    outcome: Option<Outcome>,
    parked: VecDeque<String>,
    /// Static ranges no agent has held yet; only fresh agents get these until
    /// a lease period has passed since the first hello.
    reserved: HashSet<usize>,
    first_hello: Option<Instant>,
    journal: Option<Journal>,
    events: Vec<LedgerEvent>,
}

impl Ledger {
    /// Validates the job and lays out its assignments, all unassigned.
    pub fn start_job(mut config: JobConfig) -> Result<Self> {
        let cipher = config.resolve()?;
        let full = KeyRange::full(config.key_bits)
            .map_err(|e| CoordinatorError::InvalidConfig(e.to_string()))?;
        let mut ledger = Ledger {
            config,
            cipher,
            assignments: Vec::new(),
            index: HashMap::new(),
            unissued: None,
            next_id: 0,
            result: None,
            outcome: None,
            parked: VecDeque::new(),
            reserved: HashSet::new(),
            first_hello: None,
            journal: None,
            events: Vec::new(),
        };
        match ledger.config.strategy {
            Strategy::Static { n } => {
                let p = partition(ledger.config.key_bits, n)
                    .map_err(|e| CoordinatorError::InvalidConfig(e.to_string()))?;
                for range in p.into_ranges() {
                    let idx = ledger.push_assignment(range);
                    ledger.reserved.insert(idx);
                }
            }
            Strategy::Chunked { .. } => ledger.unissued = Some(full),
        }
        Ok(ledger)
    }

    /// Starts journaling to `journal`, writing the job record first.
    pub fn start_journal(&mut self, mut journal: Journal) -> Result<()> {
        journal
            .append(&JournalRecord::Start {
                config: self.config.to_record(),
            })
            .map_err(CoordinatorError::Journal)?;
        self.journal = Some(journal);
        Ok(())
    }

    /// Rebuilds a ledger from journal records. Replay stops at the first record
    /// that does not apply; the second value is the number of records used.
    pub fn journal_replay(
        records: impl IntoIterator<Item = JournalRecord>,
    ) -> Result<(Ledger, usize)> {
        let mut records = records.into_iter();
        let config = match records.next() {
            Some(JournalRecord::Start { config }) => config.to_config()?,
            Some(_) => {
                return Err(CoordinatorError::CorruptJournal(
                    "first record is not a job start".into(),
                ))
            }
            None => return Err(CoordinatorError::CorruptJournal("empty journal".into())),
        };
        let mut ledger = Ledger::start_job(config)?;
        let now = Instant::now();
        let mut applied = 1;
        for rec in records {
            if let Err(e) = ledger.apply(&rec, now) {
                warn!("journal replay stopped at record {applied}: {e}");
                break;
            }
            applied += 1;
        }
        Ok((ledger, applied))
    }

    fn apply(&mut self, rec: &JournalRecord, now: Instant) -> Result<()> {
        let bad = |m: String| CoordinatorError::CorruptJournal(m);
        match rec {
            JournalRecord::Start { .. } => return Err(bad("duplicate job start".into())),
            JournalRecord::Assign {
                job_id,
                agent_id,
                first_key,
                last_key,
            } => {
                let idx = match self.index.get(job_id) {
                    Some(&i) if self.assignments[i].state == AssignmentState::Unassigned => i,
                    Some(_) => return Err(bad(format!("assign {job_id}: not unassigned"))),
                    None => self
                        .carve()
                        .ok_or_else(|| bad(format!("assign {job_id}: nothing left to carve")))?,
                };
                let a = &self.assignments[idx];
                if a.job_id != *job_id
                    || a.range.first().to_hex() != *first_key
                    || a.range.last().to_hex() != *last_key
                {
                    return Err(bad(format!(
                        "assign {job_id} does not match next unassigned {} {}",
                        a.job_id, a.range
                    )));
                }
                self.activate(idx, agent_id, now)?;
            }
            JournalRecord::Progress {
                job_id,
                current_key,
                keys_tried,
            } => {
                let idx = self.active_index(job_id)?;
                let key = self.parse_key(current_key)?;
                self.set_checkpoint(idx, key, *keys_tried, now)?;
            }
            JournalRecord::Exhausted { job_id } => {
                let idx = self.active_index(job_id)?;
                self.mark_exhausted(idx)?;
                self.check_complete();
            }
            JournalRecord::Release { job_id } => {
                let idx = self.active_index(job_id)?;
                self.release(idx, ReleaseReason::Restart)?;
                self.check_complete();
            }
            JournalRecord::Found { job_id, key } => {
                let idx = self.active_index(job_id)?;
                let key = self.parse_key(key)?;
                if !self.assignments[idx].range.contains(&key)
                    || !self.cipher.matches_unchecked(&key, &self.config.pairs)
                {
                    return Err(bad(format!("found record {key} does not verify")));
                }
                self.record_found(idx, key)?;
            }
        }
        Ok(())
    }

    /// Attaches a reopened journal after replay and releases every assignment
    /// that was active at the time of the crash; their agents must re-hello.
    pub fn resume_journal(&mut self, journal: Journal, now: Instant) -> Result<()> {
        self.journal = Some(journal);
        let active: Vec<usize> = self
            .assignments
            .iter()
            .enumerate()
            .filter(|(_, a)| a.state == AssignmentState::Active)
            .map(|(i, _)| i)
            .collect();
        for idx in active {
            self.release(idx, ReleaseReason::Restart)?;
        }
        let _ = now;
        self.check_complete();
        Ok(())
    }

    pub fn config(&self) -> &JobConfig {
        &self.config
    }

    pub fn cipher(&self) -> &CipherSpec {
        &self.cipher
    }

    pub fn assignments(&self) -> &[Assignment] {
        &self.assignments
    }

    pub fn assignment(&self, job_id: &str) -> Option<&Assignment> {
        self.index.get(job_id).map(|&i| &self.assignments[i])
    }

    pub fn unissued(&self) -> Option<&KeyRange> {
        self.unissued.as_ref()
    }

    pub fn result(&self) -> Option<&KeyValue> {
        self.result.as_ref()
    }

    pub fn outcome(&self) -> Option<&Outcome> {
        self.outcome.as_ref()
    }

    pub fn parked(&self) -> impl Iterator<Item = &str> {
        self.parked.iter().map(String::as_str)
    }

    pub fn drain_events(&mut self) -> Vec<LedgerEvent> {
        std::mem::take(&mut self.events)
    }

    /// Chunks the job consists of, carved or not (Chunked mode), or the number
    /// of assignments (Static mode).
    pub fn chunk_count(&self) -> BigUint {
        let carved = BigUint::from(self.assignments.len());
        match (&self.config.strategy, &self.unissued) {
            (Strategy::Chunked { chunk_keys }, Some(tail)) => {
                carved + tail.size().div_ceil(&BigUint::from(*chunk_keys))
            }
            _ => carved,
        }
    }

    pub fn status(&self) -> LedgerStatus {
        let mut status = LedgerStatus {
            total_keys: space_size(self.config.key_bits),
            searched_keys: BigUint::zero(),
            active: 0,
            unassigned: 0,
            exhausted: 0,
            outcome: self.outcome.clone(),
        };
        for a in &self.assignments {
            status.searched_keys += a.searched();
            match a.state {
                AssignmentState::Active => status.active += 1,
                AssignmentState::Unassigned => status.unassigned += 1,
                AssignmentState::Exhausted => status.exhausted += 1,
                AssignmentState::Found => {}
            }
        }
        if self.unissued.is_some() {
            status.unassigned += 1;
        }
        status
    }

    /// Checks the partition, ownership and single-result invariants.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let mut ranges: Vec<&KeyRange> = self.assignments.iter().map(|a| &a.range).collect();
        ranges.extend(self.unissued.iter());
        ranges.sort_by(|a, b| a.first().cmp(b.first()));
        let mut expect = BigUint::zero();
        for r in &ranges {
            if *r.first().magnitude() != expect {
                return Err(format!("gap or overlap at {expect:x}: next range is {r}"));
            }
            expect = r.last().magnitude() + 1u32;
        }
        if expect != space_size(self.config.key_bits) {
            return Err(format!("ranges end at {expect:x}, short of the full space"));
        }
        let mut found = 0;
        for a in &self.assignments {
            if a.state == AssignmentState::Active && a.agent_id.is_none() {
                return Err(format!("{} active without an agent", a.job_id));
            }
            if let Some(c) = &a.checkpoint {
                if !a.range.contains(c) {
                    return Err(format!("{} checkpoint {c} outside {}", a.job_id, a.range));
                }
            }
            if a.state == AssignmentState::Found {
                found += 1;
            }
        }
        if found > 1 {
            return Err(format!("{found} assignments marked found"));
        }
        Ok(())
    }

    /// An agent asks for work. Answers with an assignment, a stop, or nothing
    /// (the agent is parked until work frees up or the job ends).
    pub fn handle_hello(&mut self, agent_id: &str, now: Instant) -> Result<Vec<Outbound>> {
        if let Some(stop) = self.stop_message() {
            return Ok(vec![Outbound::to_agent(agent_id, stop)]);
        }
        self.parked.retain(|a| a != agent_id);
        let mut out = Vec::new();
        // an agent saying hello again has abandoned whatever it held
        for idx in self.active_of(agent_id) {
            self.release(idx, ReleaseReason::Rehello)?;
        }
        self.first_hello.get_or_insert(now);
        match self.next_unassigned(true) {
            Some(idx) => out.push(self.activate(idx, agent_id, now)?),
            None => self.park(agent_id),
        }
        self.dispatch_parked(now, &mut out)?;
        self.finish_if_complete(&mut out);
        Ok(out)
    }

    /// Records a checkpoint. `keys_tried == 0` is a liveness-only report and
    /// leaves the checkpoint alone.
    pub fn handle_progress(
        &mut self,
        agent_id: &str,
        job_id: &str,
        current_key: &str,
        keys_tried: u64,
        now: Instant,
    ) -> Result<()> {
        let idx = self.owned_index(agent_id, job_id)?;
        let key = self.parse_key(current_key)?;
        let a = &mut self.assignments[idx];
        if !a.range.contains(&key) {
            return Err(CoordinatorError::InvalidKey(format!(
                "progress key {key} outside {} {}",
                a.job_id, a.range
            )));
        }
        a.last_heard = Some(now);
        if keys_tried == 0 {
            return Ok(());
        }
        self.set_checkpoint(idx, key, keys_tried, now)
    }

    /// A claimed key. It is re-verified against every known pair before it is
    /// accepted; the first verified claim wins.
    pub fn handle_found(
        &mut self,
        agent_id: &str,
        job_id: &str,
        key: &str,
        now: Instant,
    ) -> Result<Vec<Outbound>> {
        let key = self.parse_key(key)?;
        if let Some(result) = &self.result {
            if key != *result && self.cipher.matches_unchecked(&key, &self.config.pairs) {
                warn!("agent {agent_id} found a second valid key {key}; keeping {result}");
            }
            return Ok(vec![Outbound::to_agent(
                agent_id,
                Message::stop(StopReason::Found),
            )]);
        }
        let idx = self.owned_index(agent_id, job_id)?;
        self.assignments[idx].last_heard = Some(now);
        if !self.assignments[idx].range.contains(&key) {
            return Err(CoordinatorError::InvalidKey(format!(
                "claimed key {key} outside {}",
                self.assignments[idx].range
            )));
        }
        if !self.cipher.matches_unchecked(&key, &self.config.pairs) {
            warn!("rejected claim {key} from {agent_id} on {job_id}");
            self.events.push(LedgerEvent::ClaimRejected {
                job_id: job_id.to_string(),
                agent_id: agent_id.to_string(),
                key: key.to_hex(),
            });
            return Err(CoordinatorError::ClaimRejected(key.to_hex()));
        }
        self.record_found(idx, key)?;
        if let Some(j) = self.journal.as_mut() {
            j.sync().map_err(CoordinatorError::Journal)?;
        }
        Ok(vec![Outbound::broadcast(Message::stop(StopReason::Found))])
    }

    /// The agent tried every key of its assignment.
    pub fn handle_exhausted(
        &mut self,
        agent_id: &str,
        job_id: &str,
        now: Instant,
    ) -> Result<Vec<Outbound>> {
        if matches!(self.outcome, Some(Outcome::Found(_))) {
            return Ok(vec![Outbound::to_agent(
                agent_id,
                Message::stop(StopReason::Found),
            )]);
        }
        let idx = self.owned_index(agent_id, job_id)?;
        self.mark_exhausted(idx)?;
        let mut out = Vec::new();
        if self.finish_if_complete(&mut out) {
            return Ok(out);
        }
        match self.next_unassigned(false) {
            Some(idx) => out.push(self.activate(idx, agent_id, now)?),
            // stays connected to pick up ranges other agents abandon
            None => self.park(agent_id),
        }
        self.dispatch_parked(now, &mut out)?;
        Ok(out)
    }

    /// Splits every active assignment not heard from within the lease timeout at
    /// its checkpoint and requeues the unsearched remainder.
    pub fn reap_leases(&mut self, now: Instant) -> Result<(Vec<KeyRange>, Vec<Outbound>)> {
        let timeout = self.config.lease_timeout;
        let expired: Vec<usize> = self
            .assignments
            .iter()
            .enumerate()
            .filter(|(_, a)| {
                a.state == AssignmentState::Active
                    && a.last_heard
                        .is_none_or(|t| now.saturating_duration_since(t) > timeout)
            })
            .map(|(i, _)| i)
            .collect();
        let mut requeued = Vec::new();
        for idx in expired {
            info!(
                "lease expired on {} held by {:?}",
                self.assignments[idx].job_id, self.assignments[idx].agent_id
            );
            if let Some(r) = self.release(idx, ReleaseReason::LeaseExpired)? {
                requeued.push(r);
            }
        }
        if !self.reserved.is_empty()
            && self
                .first_hello
                .is_some_and(|t| now.saturating_duration_since(t) > timeout)
        {
            info!(
                "{} static range(s) unclaimed for a lease period; open to any agent",
                self.reserved.len()
            );
            self.reserved.clear();
        }
        let mut out = Vec::new();
        if self.outcome.is_none() {
            self.dispatch_parked(now, &mut out)?;
            self.finish_if_complete(&mut out);
        }
        Ok((requeued, out))
    }

    /// The agent's connection went away; whatever it held is released now
    /// rather than at lease expiry.
    pub fn agent_disconnected(&mut self, agent_id: &str, now: Instant) -> Result<Vec<Outbound>> {
        self.parked.retain(|a| a != agent_id);
        let mut out = Vec::new();
        if self.outcome.is_some() {
            return Ok(out);
        }
        for idx in self.active_of(agent_id) {
            self.release(idx, ReleaseReason::Disconnected)?;
        }
        self.dispatch_parked(now, &mut out)?;
        self.finish_if_complete(&mut out);
        Ok(out)
    }

    // --- transitions shared by live handling and replay ---

    fn push_assignment(&mut self, range: KeyRange) -> usize {
        let job_id = format!("j{}", self.next_id);
        self.next_id += 1;
        let idx = self.assignments.len();
        self.index.insert(job_id.clone(), idx);
        self.assignments.push(Assignment::new(job_id, range));
        idx
    }

    /// Lowest unassigned range, carving a fresh chunk if none is queued.
    /// Lowest unassigned range, carving a new chunk when none is queued.
    /// `fresh` agents may take reserved static ranges.
    fn next_unassigned(&mut self, fresh: bool) -> Option<usize> {
        if self.outcome.is_some() {
            return None;
        }
        let queued = self
            .assignments
            .iter()
            .enumerate()
            .filter(|(i, a)| {
                a.state == AssignmentState::Unassigned && (fresh || !self.reserved.contains(i))
            })
            .min_by(|(_, a), (_, b)| a.range.first().cmp(b.range.first()))
            .map(|(i, _)| i);
        queued.or_else(|| self.carve())
    }

    fn carve(&mut self) -> Option<usize> {
        let chunk_keys = match self.config.strategy {
            Strategy::Chunked { chunk_keys } => chunk_keys,
            Strategy::Static { .. } => return None,
        };
        let tail = self.unissued.take()?;
        let (chunk, rest) = tail
            .take_front(&BigUint::from(chunk_keys))
            .expect("chunk size validated at start");
        self.unissued = rest;
        Some(self.push_assignment(chunk))
    }

    fn activate(&mut self, idx: usize, agent_id: &str, now: Instant) -> Result<Outbound> {
        self.reserved.remove(&idx);
        let a = &mut self.assignments[idx];
        debug_assert_eq!(a.state, AssignmentState::Unassigned);
        a.state = AssignmentState::Active;
        a.agent_id = Some(agent_id.to_string());
        a.last_heard = Some(now);
        a.keys_tried = 0;
        let msg = Message::assign(&a.job_id, self.cipher.id(), &a.range, &self.config.pairs);
        let rec = JournalRecord::Assign {
            job_id: a.job_id.clone(),
            agent_id: agent_id.to_string(),
            first_key: a.range.first().to_hex(),
            last_key: a.range.last().to_hex(),
        };
        debug!("{} {} -> {agent_id}", a.job_id, a.range);
        self.events.push(LedgerEvent::Activated {
            job_id: a.job_id.clone(),
            agent_id: agent_id.to_string(),
            range: a.range.clone(),
        });
        self.write(rec)?;
        Ok(Outbound::to_agent(agent_id, msg))
    }

    fn set_checkpoint(
        &mut self,
        idx: usize,
        key: KeyValue,
        keys_tried: u64,
        now: Instant,
    ) -> Result<()> {
        let a = &mut self.assignments[idx];
        if !a.range.contains(&key) {
            return Err(CoordinatorError::InvalidKey(format!(
                "checkpoint {key} outside {}",
                a.range
            )));
        }
        a.last_heard = Some(now);
        a.keys_tried = a.keys_tried.max(keys_tried);
        if a.checkpoint.as_ref().is_some_and(|c| *c >= key) {
            return Ok(());
        }
        let rec = JournalRecord::Progress {
            job_id: a.job_id.clone(),
            current_key: key.to_hex(),
            keys_tried,
        };
        a.checkpoint = Some(key);
        self.write(rec)
    }

    fn mark_exhausted(&mut self, idx: usize) -> Result<()> {
        let a = &mut self.assignments[idx];
        a.state = AssignmentState::Exhausted;
        a.checkpoint = Some(a.range.last().clone());
        let job_id = a.job_id.clone();
        self.events.push(LedgerEvent::Exhausted {
            job_id: job_id.clone(),
            agent_id: a.agent_id.clone().unwrap_or_default(),
        });
        self.write(JournalRecord::Exhausted { job_id })
    }

    /// Closes the searched prefix of an active assignment and requeues the rest.
    fn release(&mut self, idx: usize, reason: ReleaseReason) -> Result<Option<KeyRange>> {
        let a = &mut self.assignments[idx];
        debug_assert_eq!(a.state, AssignmentState::Active);
        let agent_id = a.agent_id.take();
        let job_id = a.job_id.clone();
        a.last_heard = None;
        let requeued = match a.checkpoint.clone() {
            None => {
                a.state = AssignmentState::Unassigned;
                a.keys_tried = 0;
                Some(a.range.clone())
            }
            Some(c) if c == *a.range.last() => {
                a.state = AssignmentState::Exhausted;
                None
            }
            Some(c) => {
                let rest = a.range.after(&c).expect("checkpoint inside range");
                a.range = a.range.through(&c).expect("checkpoint inside range");
                a.state = AssignmentState::Exhausted;
                rest.inspect(|r| {
                    self.push_assignment(r.clone());
                })
            }
        };
        self.events.push(LedgerEvent::Released {
            job_id: job_id.clone(),
            agent_id,
            reason,
            requeued: requeued.clone(),
        });
        self.write(JournalRecord::Release { job_id })?;
        Ok(requeued)
    }

    fn record_found(&mut self, idx: usize, key: KeyValue) -> Result<()> {
        let a = &mut self.assignments[idx];
        a.state = AssignmentState::Found;
        a.checkpoint = Some(key.clone());
        let job_id = a.job_id.clone();
        info!("key {key} verified from {job_id}");
        self.events.push(LedgerEvent::Found {
            job_id: job_id.clone(),
            agent_id: a.agent_id.clone().unwrap_or_default(),
            key: key.clone(),
        });
        self.result = Some(key.clone());
        self.outcome = Some(Outcome::Found(key.clone()));
        self.events.push(LedgerEvent::Finished(Outcome::Found(key.clone())));
        self.write(JournalRecord::Found {
            job_id,
            key: key.to_hex(),
        })
    }

    /// Sets the NotFound outcome once every range is exhausted.
    fn check_complete(&mut self) -> bool {
        if self.outcome.is_some() {
            return false;
        }
        let done = self.unissued.is_none()
            && self
                .assignments
                .iter()
                .all(|a| a.state == AssignmentState::Exhausted);
        if done {
            info!("every range exhausted without a match");
            self.outcome = Some(Outcome::NotFound);
            self.events.push(LedgerEvent::Finished(Outcome::NotFound));
        }
        done
    }

    fn finish_if_complete(&mut self, out: &mut Vec<Outbound>) -> bool {
        if self.check_complete() {
            out.push(Outbound::broadcast(Message::stop(StopReason::Shutdown)));
            self.parked.clear();
            return true;
        }
        false
    }

    fn dispatch_parked(&mut self, now: Instant, out: &mut Vec<Outbound>) -> Result<()> {
        while !self.parked.is_empty() {
            let Some(idx) = self.next_unassigned(false) else {
                break;
            };
            let agent = self.parked.pop_front().expect("non-empty");
            out.push(self.activate(idx, &agent, now)?);
        }
        Ok(())
    }

    fn park(&mut self, agent_id: &str) {
        debug!("parking {agent_id}: nothing unassigned");
        self.parked.push_back(agent_id.to_string());
        self.events.push(LedgerEvent::Parked {
            agent_id: agent_id.to_string(),
        });
    }

    fn stop_message(&self) -> Option<Message> {
        self.outcome.as_ref().map(|o| {
            Message::stop(match o {
                Outcome::Found(_) => StopReason::Found,
                Outcome::NotFound => StopReason::Shutdown,
            })
        })
    }

    fn active_of(&self, agent_id: &str) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, a)| {
                a.state == AssignmentState::Active && a.agent_id.as_deref() == Some(agent_id)
            })
            .map(|(i, _)| i)
            .collect()
    }

    fn active_index(&self, job_id: &str) -> Result<usize> {
        let idx = *self
            .index
            .get(job_id)
            .ok_or_else(|| CoordinatorError::UnknownJob(job_id.to_string()))?;
        if self.assignments[idx].state != AssignmentState::Active {
            return Err(CoordinatorError::CorruptJournal(format!(
                "{job_id} is not active"
            )));
        }
        Ok(idx)
    }

    fn owned_index(&self, agent_id: &str, job_id: &str) -> Result<usize> {
        let idx = *self
            .index
            .get(job_id)
            .ok_or_else(|| CoordinatorError::UnknownJob(job_id.to_string()))?;
        let a = &self.assignments[idx];
        if a.state != AssignmentState::Active || a.agent_id.as_deref() != Some(agent_id) {
            return Err(CoordinatorError::NotOwner {
                job_id: job_id.to_string(),
                agent_id: agent_id.to_string(),
            });
        }
        Ok(idx)
    }

    fn parse_key(&self, hex: &str) -> Result<KeyValue> {
        KeyValue::from_hex(hex, self.config.key_bits)
            .map_err(|e| CoordinatorError::InvalidKey(e.to_string()))
    }

    fn write(&mut self, rec: JournalRecord) -> Result<()> {
        match self.journal.as_mut() {
            Some(j) => j.append(&rec).map_err(CoordinatorError::Journal),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use std::time::Duration;

    use super::*;
    use crate::cipher::{registry_lookup, Block, KnownPair};

    fn xor_pair(key: u64, bits: u32) -> KnownPair {
        let spec = registry_lookup("xor16").unwrap().restrict_key(bits).unwrap();
        spec.make_pair(
            &Block::from_u64(0x1234, 16).unwrap(),
            &KeyValue::from_u64(key, bits).unwrap(),
        )
        .unwrap()
    }

    fn ledger(bits: u32, strategy: Strategy, planted: u64) -> Ledger {
        Ledger::start_job(JobConfig::new("xor16", bits, vec![xor_pair(planted, bits)], strategy))
            .unwrap()
    }

    fn assigned_range(out: &[Outbound]) -> KeyRange {
        out.iter()
            .find_map(|o| o.message.assigned_range())
            .expect("an assign")
            .unwrap()
    }

    fn assigned_job(out: &[Outbound]) -> String {
        out.iter()
            .find_map(|o| match &o.message {
                Message::Assign { job_id, .. } => Some(job_id.clone()),
                _ => None,
            })
            .expect("an assign")
    }

    fn key(hex: &str, bits: u32) -> KeyValue {
        KeyValue::from_hex(hex, bits).unwrap()
    }

    #[test]
    fn static_start_lays_out_device_ranges() {
        let l = ledger(4, Strategy::Static { n: 4 }, 6);
        let got: Vec<String> = l.assignments().iter().map(|a| a.range.to_string()).collect();
        assert_eq!(got, ["[0-3]", "[4-7]", "[8-b]", "[c-f]"]);
        assert!(l
            .assignments()
            .iter()
            .all(|a| a.state == AssignmentState::Unassigned));
        assert_eq!(l.cipher().id(), "xor16-r4");

        let one = ledger(8, Strategy::Static { n: 1 }, 6);
        assert_eq!(one.assignments()[0].range.to_string(), "[00-ff]");
    }

    #[test]
    fn chunked_start_counts_chunks() {
        let l = ledger(16, Strategy::Chunked { chunk_keys: 1 << 12 }, 6);
        assert_eq!(l.chunk_count(), BigUint::from(16u32));
        let mut cfg = JobConfig::new(
            "speck32_64",
            20,
            vec![KnownPair::parse("6574694c:a86842f2", 32).unwrap()],
            Strategy::Chunked { chunk_keys: 1 << 16 },
        );
        cfg.lease_timeout = Duration::from_secs(1);
        assert_eq!(Ledger::start_job(cfg).unwrap().chunk_count(), BigUint::from(16u32));
        l.check_invariants().unwrap();
    }

    #[test]
    fn hellos_get_distinct_ranges_then_park() {
        let mut l = ledger(4, Strategy::Static { n: 4 }, 6);
        let now = Instant::now();
        let mut seen = Vec::new();
        for i in 0..4 {
            let out = l.handle_hello(&format!("a{i}"), now).unwrap();
            seen.push(assigned_range(&out).to_string());
        }
        assert_eq!(seen, ["[0-3]", "[4-7]", "[8-b]", "[c-f]"]);
        assert!(l.handle_hello("a4", now).unwrap().is_empty());
        assert_eq!(l.parked().collect::<Vec<_>>(), ["a4"]);
        l.check_invariants().unwrap();
    }

    #[test]
    fn progress_rules() {
        let mut l = ledger(4, Strategy::Static { n: 4 }, 6);
        let now = Instant::now();
        l.handle_hello("a", now).unwrap();
        l.handle_progress("a", "j0", "1", 2, now).unwrap();
        assert_eq!(l.assignment("j0").unwrap().checkpoint, Some(key("1", 4)));
        l.handle_progress("a", "j0", "2", 3, now).unwrap();
        assert_eq!(l.assignment("j0").unwrap().checkpoint, Some(key("2", 4)));
        // liveness-only report leaves the checkpoint
        l.handle_progress("a", "j0", "0", 0, now).unwrap();
        assert_eq!(l.assignment("j0").unwrap().checkpoint, Some(key("2", 4)));
        assert!(matches!(
            l.handle_progress("a", "j0", "9", 4, now),
            Err(CoordinatorError::InvalidKey(_))
        ));
        assert!(matches!(
            l.handle_progress("b", "j0", "3", 4, now),
            Err(CoordinatorError::NotOwner { .. })
        ));
        assert!(matches!(
            l.handle_progress("a", "j1", "5", 1, now),
            Err(CoordinatorError::NotOwner { .. })
        ));
        assert!(matches!(
            l.handle_progress("a", "zz", "5", 1, now),
            Err(CoordinatorError::UnknownJob(_))
        ));
        assert!(l.handle_progress("a", "j0", "03", 1, now).is_err());
    }

    #[test]
    fn found_is_verified_and_first_wins() {
        let mut l = ledger(4, Strategy::Static { n: 4 }, 6);
        let now = Instant::now();
        l.handle_hello("a", now).unwrap();
        l.handle_hello("b", now).unwrap();
        // b holds [4-7]; 7 is the planted key + 1
        assert!(matches!(
            l.handle_found("b", "j1", "7", now),
            Err(CoordinatorError::ClaimRejected(_))
        ));
        assert_eq!(l.assignment("j1").unwrap().state, AssignmentState::Active);
        assert!(l.outcome().is_none());
        // a cannot claim outside its own range
        assert!(l.handle_found("a", "j0", "6", now).is_err());

        let out = l.handle_found("b", "j1", "6", now).unwrap();
        assert_eq!(
            out,
            vec![Outbound::broadcast(Message::stop(StopReason::Found))]
        );
        assert_eq!(l.outcome(), Some(&Outcome::Found(key("6", 4))));
        // a duplicate claim is acknowledged with a stop
        let again = l.handle_found("b", "j1", "6", now).unwrap();
        assert_eq!(again[0].message, Message::stop(StopReason::Found));
        assert_eq!(
            l.assignments()
                .iter()
                .filter(|a| a.state == AssignmentState::Found)
                .count(),
            1
        );
        // late hello
        let late = l.handle_hello("c", now).unwrap();
        assert_eq!(late[0].message, Message::stop(StopReason::Found));
        l.check_invariants().unwrap();
    }

    #[test]
    fn chunked_exhaustion_flows_to_not_found() {
        // planted key needs 5 bits; the job only covers 4
        let pair = xor_pair(0x13, 5);
        let mut l = Ledger::start_job(JobConfig::new(
            "xor16",
            4,
            vec![pair],
            Strategy::Chunked { chunk_keys: 8 },
        ))
        .unwrap();
        let now = Instant::now();
        let out = l.handle_hello("a", now).unwrap();
        assert_eq!(assigned_range(&out).to_string(), "[0-7]");
        let out = l.handle_exhausted("a", "j0", now).unwrap();
        assert_eq!(assigned_range(&out).to_string(), "[8-f]");
        let out = l.handle_exhausted("a", &assigned_job(&out), now).unwrap();
        assert_eq!(
            out,
            vec![Outbound::broadcast(Message::stop(StopReason::Shutdown))]
        );
        assert_eq!(l.outcome(), Some(&Outcome::NotFound));
    }

    #[test]
    fn static_exhaustion_parks_the_agent() {
        let mut l = ledger(4, Strategy::Static { n: 2 }, 0x9);
        let now = Instant::now();
        l.handle_hello("a", now).unwrap();
        l.handle_hello("b", now).unwrap();
        let out = l.handle_exhausted("a", "j0", now).unwrap();
        assert!(out.is_empty());
        assert_eq!(l.parked().collect::<Vec<_>>(), vec!["a"]);
        assert!(l.outcome().is_none());
        let out = l.handle_exhausted("b", "j1", now).unwrap();
        assert_eq!(out, vec![Outbound::broadcast(Message::stop(StopReason::Shutdown))]);
    }

    #[test]
    fn reserved_static_ranges_wait_for_fresh_agents() {
        let mut cfg = JobConfig::new("xor16", 4, vec![xor_pair(0x9, 4)], Strategy::Static { n: 3 });
        cfg.lease_timeout = Duration::from_secs(10);
        let mut l = Ledger::start_job(cfg).unwrap();
        let t0 = Instant::now();
        l.handle_hello("a", t0).unwrap();
        l.handle_exhausted("a", "j0", t0).unwrap();
        assert_eq!(l.parked().count(), 1);
        // a newcomer still gets its own range
        let out = l.handle_hello("b", t0).unwrap();
        assert_eq!(out[0].message.assigned_range().unwrap().unwrap().first().to_u64(), Some(6));
        // the third range is opened to the parked agent after a lease period
        let (_, out) = l.reap_leases(t0 + Duration::from_secs(5)).unwrap();
        assert!(out.is_empty());
        l.handle_progress("b", "j1", "6", 0, t0 + Duration::from_secs(9)).unwrap();
        let (_, out) = l.reap_leases(t0 + Duration::from_secs(11)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].to, Recipient::Agent("a".into()));
        assert_eq!(out[0].message.assigned_range().unwrap().unwrap().first().to_u64(), Some(0xb));
        l.check_invariants().unwrap();
    }

    #[test]
    fn reaper_splits_at_checkpoint() {
        let mut cfg = JobConfig::new("xor16", 8, vec![xor_pair(0xff, 8)], Strategy::Static { n: 2 });
        cfg.lease_timeout = Duration::from_secs(30);
        let mut l = Ledger::start_job(cfg).unwrap();
        let t0 = Instant::now();
        l.handle_hello("a", t0).unwrap();
        l.handle_hello("b", t0).unwrap();
        l.handle_progress("a", "j0", "3f", 64, t0 + Duration::from_secs(1))
            .unwrap();
        // b keeps reporting, a goes quiet
        l.handle_progress("b", "j1", "80", 0, t0 + Duration::from_secs(20))
            .unwrap();
        let (requeued, out) = l.reap_leases(t0 + Duration::from_secs(32)).unwrap();
        assert_eq!(requeued, vec![KeyRange::from_hex("40", "7f", 8).unwrap()]);
        assert!(out.is_empty());
        let j0 = l.assignment("j0").unwrap();
        assert_eq!(j0.state, AssignmentState::Exhausted);
        assert_eq!(j0.range, KeyRange::from_hex("00", "3f", 8).unwrap());
        assert_eq!(l.assignment("j1").unwrap().state, AssignmentState::Active);
        l.check_invariants().unwrap();

        // a newcomer picks up the requeued half
        let out = l.handle_hello("c", t0 + Duration::from_secs(33)).unwrap();
        assert_eq!(assigned_range(&out), KeyRange::from_hex("40", "7f", 8).unwrap());
    }

    #[test]
    fn reaper_requeues_whole_range_without_checkpoint() {
        let mut l = ledger(8, Strategy::Chunked { chunk_keys: 64 }, 0xff);
        let t0 = Instant::now();
        l.handle_hello("a", t0).unwrap();
        let (requeued, _) = l.reap_leases(t0 + Duration::from_secs(31)).unwrap();
        assert_eq!(requeued, vec![KeyRange::from_hex("00", "3f", 8).unwrap()]);
        assert_eq!(l.assignment("j0").unwrap().state, AssignmentState::Unassigned);
        // parked agents are handed requeued work
        let mut l = ledger(4, Strategy::Static { n: 1 }, 0x3);
        l.handle_hello("a", t0).unwrap();
        assert!(l.handle_hello("b", t0).unwrap().is_empty());
        let (_, out) = l.reap_leases(t0 + Duration::from_secs(31)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].to, Recipient::Agent("b".into()));
        l.check_invariants().unwrap();
    }

    #[test]
    fn disconnect_and_rehello_release_immediately() {
        let mut l = ledger(8, Strategy::Chunked { chunk_keys: 128 }, 0xff);
        let t0 = Instant::now();
        l.handle_hello("a", t0).unwrap();
        l.handle_progress("a", "j0", "0f", 16, t0).unwrap();
        let out = l.handle_hello("a", t0).unwrap();
        // the remainder of a's old chunk is the lowest unassigned range
        assert_eq!(assigned_range(&out), KeyRange::from_hex("10", "7f", 8).unwrap());
        l.agent_disconnected("a", t0).unwrap();
        l.check_invariants().unwrap();
        let status = l.status();
        assert_eq!(status.searched_keys, BigUint::from(16u32));
        assert_eq!(status.active, 0);
    }

    #[test]
    fn replay_reproduces_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("journal");
        let mut l = ledger(8, Strategy::Chunked { chunk_keys: 64 }, 0xc3);
        l.start_journal(Journal::create(&path).unwrap()).unwrap();
        let t0 = Instant::now();
        l.handle_hello("a", t0).unwrap();
        l.handle_hello("b", t0).unwrap();
        l.handle_progress("a", "j0", "1f", 32, t0).unwrap();
        l.handle_exhausted("b", "j1", t0).unwrap();
        l.handle_progress("b", "j2", "8f", 16, t0).unwrap();

        let scan = super::super::read_journal(std::fs::File::open(&path).unwrap()).unwrap();
        let (mut r, used) = Ledger::journal_replay(scan.records.clone()).unwrap();
        assert_eq!(used, scan.records.len());
        assert_eq!(r.assignment("j0").unwrap().checkpoint, Some(key("1f", 8)));
        assert_eq!(r.assignment("j1").unwrap().state, AssignmentState::Exhausted);
        assert_eq!(r.assignment("j2").unwrap().checkpoint, Some(key("8f", 8)));

        r.resume_journal(Journal::reopen(&path, scan.valid_bytes).unwrap(), t0)
            .unwrap();
        r.check_invariants().unwrap();
        assert_eq!(r.status().active, 0);
        assert_eq!(r.status().searched_keys, BigUint::from(32u32 + 64 + 16));
        // the restart's releases are journaled, so a second replay agrees
        let scan2 = super::super::read_journal(std::fs::File::open(&path).unwrap()).unwrap();
        let (r2, _) = Ledger::journal_replay(scan2.records).unwrap();
        assert_eq!(r2.status(), r.status());
    }

    #[test]
    fn replay_of_bare_start_is_all_unassigned() {
        let l = ledger(4, Strategy::Static { n: 4 }, 6);
        let rec = JournalRecord::Start {
            config: l.config().to_record(),
        };
        let (r, used) = Ledger::journal_replay(vec![rec]).unwrap();
        assert_eq!(used, 1);
        assert!(r
            .assignments()
            .iter()
            .all(|a| a.state == AssignmentState::Unassigned));
        assert!(Ledger::journal_replay(Vec::new()).is_err());
    }

    #[test]
    fn replay_after_found_reports_result() {
        let mut l = ledger(4, Strategy::Static { n: 2 }, 6);
        let t0 = Instant::now();
        let mut records = vec![JournalRecord::Start {
            config: l.config().to_record(),
        }];
        l.handle_hello("a", t0).unwrap();
        records.push(JournalRecord::Assign {
            job_id: "j0".into(),
            agent_id: "a".into(),
            first_key: "0".into(),
            last_key: "7".into(),
        });
        records.push(JournalRecord::Found {
            job_id: "j0".into(),
            key: "6".into(),
        });
        let (r, used) = Ledger::journal_replay(records.clone()).unwrap();
        assert_eq!(used, 3);
        assert_eq!(r.outcome(), Some(&Outcome::Found(key("6", 4))));

        // a forged result is not trusted
        records[2] = JournalRecord::Found {
            job_id: "j0".into(),
            key: "5".into(),
        };
        let (r, used) = Ledger::journal_replay(records).unwrap();
        assert_eq!(used, 2);
        assert!(r.outcome().is_none());
    }
}
