//! The searching side: connects to an arbiter, asks for work, splits each
//! assignment across local lanes and reports back.

mod search;

pub use search::{rate_probe, search, SearchLimits, SearchOutcome, SearchTask, STOP_CHECK_KEYS};

use std::io::{self, Write};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use thiserror::Error;

use crate::cipher::{registry_lookup, CipherSpec, KnownPair};
use crate::keyspace::{KeyRange, KeyValue, KeyspaceError};
use crate::protocol::{write_message, Message, MessageReader, StopReason};
use crate::timeline::{Timeline, TimelineEvent};
use crate::transport::{Closer, Connector};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("task rejected: {0}")]
    Task(String),
    #[error(transparent)]
    Keyspace(#[from] KeyspaceError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub agent_id: String,
    /// Search lanes per assignment.
    pub parallelism: usize,
    /// Keys per second for the whole agent, shared evenly by its lanes.
    pub rate_limit: Option<f64>,
    pub rate_hint: Option<f64>,
    /// Spacing of Progress messages while searching.
    pub progress_every: Duration,
    pub backoff_initial: Duration,
    pub backoff_max: Duration,
    /// Stop reconnecting once the arbiter has been unreachable this long.
    pub give_up_after: Option<Duration>,
    /// Simulated failure: after this many keys the agent stops searching and
    /// goes silent but keeps its connection open.
    pub die_after_keys: Option<u64>,
    /// Raised from outside to make the agent quit.
    pub interrupt: Arc<AtomicBool>,
    pub timeline: Option<Timeline>,
}

impl AgentConfig {
    pub fn new(agent_id: impl Into<String>) -> Self {
        Self {
            agent_id: agent_id.into(),
            parallelism: 1,
            rate_limit: None,
            rate_hint: None,
            progress_every: Duration::from_secs(1),
            backoff_initial: Duration::from_millis(100),
            backoff_max: Duration::from_secs(5),
            give_up_after: Some(Duration::from_secs(30)),
            die_after_keys: None,
            interrupt: Arc::new(AtomicBool::new(false)),
            timeline: None,
        }
    }
}

/// A contiguous run of keys one lane actually tested.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriedInterval {
    pub job_id: String,
    pub range: KeyRange,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AgentExit {
    Stopped(StopReason),
    /// The simulated failure fired.
    Died,
    Interrupted,
    /// The arbiter refused this agent outright.
    Refused(String),
    GaveUp,
}

#[derive(Debug, Clone)]
pub struct AgentReport {
    pub agent_id: String,
    pub exit: AgentExit,
    pub keys_tried: u64,
    pub assignments: u64,
    pub claimed: Option<KeyValue>,
    pub tried: Vec<TriedInterval>,
}

impl AgentReport {
    fn new(agent_id: &str) -> Self {
        Self {
            agent_id: agent_id.to_string(),
            exit: AgentExit::GaveUp,
            keys_tried: 0,
            assignments: 0,
            claimed: None,
            tried: Vec::new(),
        }
    }
}

/// Runs one agent until the arbiter says stop, the agent is interrupted, or the
/// arbiter stays unreachable past `give_up_after`.
pub fn run_agent(connector: &Connector, config: AgentConfig) -> Result<AgentReport, AgentError> {
    if config.parallelism == 0 {
        return Err(AgentError::Task("parallelism must be at least 1".into()));
    }
    let mut report = AgentReport::new(&config.agent_id);
    let budget = config.die_after_keys.map(|n| Arc::new(AtomicU64::new(n)));
    let mut backoff = config.backoff_initial;
    let mut unreachable_since: Option<Instant> = None;
    loop {
        if config.interrupt.load(Ordering::SeqCst) {
            report.exit = AgentExit::Interrupted;
            break;
        }
        match connector.connect() {
            Ok(conn) => {
                debug!("{} connected to {}", config.agent_id, conn.peer);
                let mut session = Session::new(&config, budget.clone(), conn.closer.clone(), &mut report);
                let end = session.run(conn.reader, conn.writer)?;
                conn.closer.close();
                match end {
                    SessionEnd::Exit(exit) => {
                        report.exit = exit;
                        break;
                    }
                    SessionEnd::Lost { heard } => {
                        if heard {
                            backoff = config.backoff_initial;
                            unreachable_since = None;
                        }
                        info!("{} lost its connection", config.agent_id);
                    }
                }
            }
            Err(e) => debug!("{}: connect failed: {e}", config.agent_id),
        }
        let since = *unreachable_since.get_or_insert_with(Instant::now);
        if config.give_up_after.is_some_and(|limit| since.elapsed() >= limit) {
            warn!("{} giving up on the arbiter", config.agent_id);
            report.exit = AgentExit::GaveUp;
            break;
        }
        sleep_unless(&config.interrupt, backoff);
        backoff = (backoff * 2).min(config.backoff_max);
    }
    if let Some(t) = &config.timeline {
        t.push(TimelineEvent::AgentExited {
            agent_id: config.agent_id.clone(),
            reason: format!("{:?}", report.exit),
        });
    }
    Ok(report)
}

fn sleep_unless(flag: &AtomicBool, total: Duration) {
    let until = Instant::now() + total;
    while !flag.load(Ordering::SeqCst) {
        let now = Instant::now();
        if now >= until {
            return;
        }
        thread::sleep((until - now).min(Duration::from_millis(20)));
    }
}

enum SessionEnd {
    Exit(AgentExit),
    Lost { heard: bool },
}

enum Event {
    Net(Message),
    NetBad(String),
    Closed,
    Lane { lane: usize, update: LaneUpdate },
}

enum LaneUpdate {
    Progress { last: KeyValue, tried: u64 },
    Done(Result<SearchOutcome, String>),
}

struct Lane {
    range: KeyRange,
    /// First untried key; `None` once the lane has covered its range.
    next: Option<KeyValue>,
    tried: u64,
    /// Keys tried by the running thread, folded into `tried` when it ends.
    running_tried: u64,
    handle: Option<JoinHandle<()>>,
    run_start: Option<KeyValue>,
    found: Option<KeyValue>,
}

struct Job {
    job_id: String,
    spec: CipherSpec,
    range: KeyRange,
    pairs: Vec<KnownPair>,
    lanes: Vec<Lane>,
    stop: Arc<AtomicBool>,
    /// Last checkpoint sent.
    reported: Option<KeyValue>,
    awaiting_verdict: Option<KeyValue>,
}

impl Job {
    fn running(&self) -> bool {
        self.lanes.iter().any(|l| l.handle.is_some())
    }

    fn keys_tried(&self) -> u64 {
        self.lanes.iter().map(|l| l.tried + l.running_tried).sum()
    }

    /// Highest key such that every key from the range start through it has
    /// been tried.
    fn checkpoint(&self) -> Option<KeyValue> {
        let mut through = None;
        for lane in &self.lanes {
            match &lane.next {
                None => through = Some(lane.range.last().clone()),
                Some(n) if n != lane.range.first() => return n.decrement().ok(),
                Some(_) => return through,
            }
        }
        through
    }
}

struct Session<'a> {
    config: &'a AgentConfig,
    budget: Option<Arc<AtomicU64>>,
    closer: Closer,
    report: &'a mut AgentReport,
    events_tx: Sender<Event>,
    events_rx: Receiver<Event>,
    job: Option<Job>,
    dead: bool,
    heard: bool,
}

impl<'a> Session<'a> {
    fn new(
        config: &'a AgentConfig,
        budget: Option<Arc<AtomicU64>>,
        closer: Closer,
        report: &'a mut AgentReport,
    ) -> Self {
        let (events_tx, events_rx) = mpsc::channel();
        Self {
            config,
            budget,
            closer,
            report,
            events_tx,
            events_rx,
            job: None,
            dead: false,
            heard: false,
        }
    }

    fn run(
        &mut self,
        reader: Box<dyn io::Read + Send>,
        mut writer: Box<dyn Write + Send>,
    ) -> Result<SessionEnd, AgentError> {
        let tx = self.events_tx.clone();
        let reader_thread = thread::spawn(move || {
            let mut reader = MessageReader::new(reader);
            loop {
                let ev = match reader.next_message() {
                    Ok(Some(m)) => Event::Net(m),
                    Ok(None) | Err(crate::protocol::ProtocolError::Io(_)) => Event::Closed,
                    Err(e) => Event::NetBad(e.to_string()),
                };
                let closed = matches!(ev, Event::Closed);
                if tx.send(ev).is_err() || closed {
                    return;
                }
            }
        });

        let end = self.drive(&mut writer);
        self.halt_job();
        self.closer.close();
        let _ = reader_thread.join();
        end
    }

    fn drive(&mut self, writer: &mut dyn Write) -> Result<SessionEnd, AgentError> {
        let id = self.config.agent_id.clone();
        if write_message(writer, &Message::hello(&id, self.config.rate_hint)).is_err() {
            return Ok(SessionEnd::Lost { heard: false });
        }
        let mut next_progress = Instant::now() + self.config.progress_every;
        loop {
            if self.config.interrupt.load(Ordering::SeqCst) {
                return Ok(SessionEnd::Exit(AgentExit::Interrupted));
            }
            let wait = next_progress
                .saturating_duration_since(Instant::now())
                .min(Duration::from_millis(50));
            let event = match self.events_rx.recv_timeout(wait) {
                Ok(e) => Some(e),
                Err(RecvTimeoutError::Timeout) => None,
                Err(RecvTimeoutError::Disconnected) => return Ok(SessionEnd::Lost { heard: self.heard }),
            };
            if self.dead {
                // a dead host answers nothing; it only notices the line drop
                match event {
                    Some(Event::Closed) => return Ok(SessionEnd::Exit(AgentExit::Died)),
                    Some(Event::Lane { lane, update }) => self.lane_update(lane, update),
                    _ => {}
                }
                continue;
            }
            let sent = match event {
                None => Ok(()),
                Some(Event::Closed) => return Ok(SessionEnd::Lost { heard: self.heard }),
                Some(Event::NetBad(e)) => {
                    warn!("{id}: unreadable message: {e}");
                    Ok(())
                }
                Some(Event::Net(m)) => {
                    self.heard = true;
                    match self.on_message(m, writer)? {
                        Some(exit) => return Ok(SessionEnd::Exit(exit)),
                        None => Ok(()),
                    }
                }
                Some(Event::Lane { lane, update }) => {
                    self.lane_update(lane, update);
                    self.after_lane_event(writer)
                }
            };
            if sent.is_err() {
                return Ok(SessionEnd::Lost { heard: self.heard });
            }
            if self.dead {
                continue;
            }
            if Instant::now() >= next_progress {
                next_progress = Instant::now() + self.config.progress_every;
                if self.send_progress(writer).is_err() {
                    return Ok(SessionEnd::Lost { heard: self.heard });
                }
            }
        }
    }

    fn on_message(&mut self, m: Message, writer: &mut dyn Write) -> Result<Option<AgentExit>, AgentError> {
        let id = &self.config.agent_id;
        match m {
            Message::Assign { .. } => {
                if self.job.as_ref().is_some_and(|j| j.running() || j.awaiting_verdict.is_some()) {
                    warn!("{id}: assignment while busy; ignored");
                    return Ok(None);
                }
                match self.accept_assignment(&m) {
                    Ok(()) => {
                        let job = self.job.as_ref().expect("just set");
                        let _ = write_message(writer, &Message::progress(&job.job_id, job.range.first(), 0));
                    }
                    Err(e) => {
                        warn!("{id}: bad assignment: {e}");
                        let _ = write_message(writer, &Message::error("bad_assignment", e.to_string()));
                    }
                }
            }
            Message::Stop { reason } => {
                info!("{id}: stop ({reason:?})");
                return Ok(Some(AgentExit::Stopped(reason)));
            }
            Message::Error { code, detail } => {
                if code == "duplicate_agent" {
                    return Ok(Some(AgentExit::Refused(detail)));
                }
                let rejected = code == "claim_rejected";
                match self.job.as_mut() {
                    Some(job) if rejected && job.awaiting_verdict.is_some() => {
                        let key = job.awaiting_verdict.take().expect("checked");
                        warn!("{id}: claim {key} rejected; resuming");
                        self.report.claimed = None;
                        if let Some(lane) = job.lanes.iter_mut().find(|l| l.found.as_ref() == Some(&key)) {
                            lane.found = None;
                            lane.next = if key == *lane.range.last() {
                                None
                            } else {
                                Some(key.increment()?)
                            };
                        }
                        self.start_lanes()?;
                        if self.job.as_ref().is_some_and(|j| !j.running()) {
                            let _ = self.after_lane_event(writer);
                        }
                    }
                    Some(_) if code == "not_owner" || code == "unknown_job" => {
                        // the arbiter took the assignment back; start over
                        warn!("{id}: {detail}; asking for new work");
                        self.halt_job();
                        write_message(writer, &Message::hello(id, self.config.rate_hint))?;
                    }
                    _ => warn!("{id}: arbiter error {code}: {detail}"),
                }
            }
            other => warn!("{id}: unexpected {}", other.kind()),
        }
        Ok(None)
    }

    fn accept_assignment(&mut self, m: &Message) -> Result<(), AgentError> {
        let Message::Assign {
            job_id,
            cipher_id,
            key_bits,
            pairs,
            ..
        } = m
        else {
            unreachable!("caller matched Assign");
        };
        let range = m
            .assigned_range()
            .expect("assign")
            .map_err(|e| AgentError::Task(e.to_string()))?;
        let spec = registry_lookup(cipher_id).map_err(|e| AgentError::Task(e.to_string()))?;
        if spec.key_bits() != *key_bits {
            return Err(AgentError::Task(format!(
                "{cipher_id} has {}-bit keys, assignment says {key_bits}",
                spec.key_bits()
            )));
        }
        let pairs = pairs
            .iter()
            .map(|p| p.to_pair(spec.block_bits()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| AgentError::Task(e.to_string()))?;
        let lanes_n = range
            .size()
            .min(num_bigint::BigUint::from(self.config.parallelism))
            .try_into()
            .unwrap_or(1u64);
        let lanes = range
            .split(lanes_n)?
            .into_iter()
            .map(|r| Lane {
                next: Some(r.first().clone()),
                range: r,
                tried: 0,
                running_tried: 0,
                handle: None,
                run_start: None,
                found: None,
            })
            .collect();
        debug!("{}: {job_id} {range} on {lanes_n} lane(s)", self.config.agent_id);
        self.report.assignments += 1;
        self.job = Some(Job {
            job_id: job_id.clone(),
            spec,
            range,
            pairs,
            lanes,
            stop: Arc::new(AtomicBool::new(false)),
            reported: None,
            awaiting_verdict: None,
        });
        self.start_lanes()
    }

    fn start_lanes(&mut self) -> Result<(), AgentError> {
        let job = self.job.as_mut().expect("job");
        job.stop.store(false, Ordering::SeqCst);
        let lanes = job.lanes.len();
        let limits = SearchLimits {
            rate_limit: self.config.rate_limit.map(|r| r / lanes as f64),
            progress_every: Duration::from_millis(50),
            budget: self.budget.clone(),
        };
        for (i, lane) in job.lanes.iter_mut().enumerate() {
            if lane.handle.is_some() || lane.found.is_some() {
                continue;
            }
            let Some(next) = lane.next.clone() else {
                continue;
            };
            let task = SearchTask::new(job.job_id.clone(), job.spec.clone(), lane.range.clone(), job.pairs.clone())
                .resume_from(next.clone());
            lane.run_start = Some(next);
            let tx = self.events_tx.clone();
            let stop = Arc::clone(&job.stop);
            let limits = limits.clone();
            lane.handle = Some(thread::spawn(move || {
                let out = search(&task, &stop, &limits, |last, tried| {
                    let _ = tx.send(Event::Lane {
                        lane: i,
                        update: LaneUpdate::Progress {
                            last: last.clone(),
                            tried,
                        },
                    });
                });
                let _ = tx.send(Event::Lane {
                    lane: i,
                    update: LaneUpdate::Done(out.map_err(|e| e.to_string())),
                });
            }));
        }
        Ok(())
    }

    fn lane_update(&mut self, i: usize, update: LaneUpdate) {
        let Some(job) = self.job.as_mut() else { return };
        let job_id = job.job_id.clone();
        let lane = &mut job.lanes[i];
        match update {
            LaneUpdate::Progress { last, tried } => {
                lane.running_tried = tried;
                lane.next = if last == *lane.range.last() {
                    None
                } else {
                    last.increment().ok()
                };
            }
            LaneUpdate::Done(result) => {
                if let Some(h) = lane.handle.take() {
                    let _ = h.join();
                }
                lane.running_tried = 0;
                let start = lane.run_start.take().expect("lane was running");
                let (tried, last_tried) = match result {
                    Ok(SearchOutcome::Found { key, keys_tried }) => {
                        lane.next = Some(key.clone());
                        lane.found = Some(key.clone());
                        (keys_tried, Some(key))
                    }
                    Ok(SearchOutcome::Exhausted { keys_tried }) => {
                        lane.next = None;
                        (keys_tried, Some(lane.range.last().clone()))
                    }
                    Ok(SearchOutcome::Stopped { at, keys_tried }) => {
                        let last = (at != start).then(|| at.decrement().ok()).flatten();
                        lane.next = Some(at);
                        (keys_tried, last)
                    }
                    Err(e) => {
                        warn!("{}: lane {i} failed: {e}", self.config.agent_id);
                        lane.next = Some(start.clone());
                        (0, None)
                    }
                };
                lane.tried += tried;
                self.report.keys_tried += tried;
                if let Some(last) = last_tried {
                    if let Ok(range) = KeyRange::new(start, last) {
                        self.report.tried.push(TriedInterval { job_id, range });
                    }
                }
            }
        }
    }

    /// Reacts to lanes finishing: claim a key, report exhaustion, or die.
    fn after_lane_event(&mut self, writer: &mut dyn Write) -> io::Result<()> {
        let Some(job) = self.job.as_mut() else { return Ok(()) };
        if self.budget.as_ref().is_some_and(|b| b.load(Ordering::SeqCst) == 0) && !self.dead {
            self.dead = true;
            job.stop.store(true, Ordering::SeqCst);
            info!("{} dies after {} keys", self.config.agent_id, self.report.keys_tried);
            if let Some(t) = &self.config.timeline {
                t.push(TimelineEvent::AgentKilled {
                    agent_id: self.config.agent_id.clone(),
                    keys_tried: self.config.die_after_keys.unwrap_or_default(),
                });
            }
            return Ok(());
        }
        if job.awaiting_verdict.is_some() {
            return Ok(());
        }
        let found = job.lanes.iter().filter_map(|l| l.found.clone()).min();
        if found.is_some() {
            // let the other lanes reach a clean stop before claiming
            job.stop.store(true, Ordering::SeqCst);
        }
        if job.running() {
            return Ok(());
        }
        if let Some(key) = found {
            let job_id = job.job_id.clone();
            self.send_progress(writer)?;
            let job = self.job.as_mut().expect("job");
            job.awaiting_verdict = Some(key.clone());
            self.report.claimed = Some(key.clone());
            info!("{}: claiming {key} on {job_id}", self.config.agent_id);
            return write_message(writer, &Message::found(job_id, &key));
        }
        if job.lanes.iter().all(|l| l.next.is_none()) {
            let job_id = job.job_id.clone();
            self.send_progress(writer)?;
            self.job = None;
            return write_message(writer, &Message::exhausted(job_id));
        }
        // stopped for another reason; nothing to report
        Ok(())
    }

    /// Sends the checkpoint if it moved, a heartbeat otherwise.
    fn send_progress(&mut self, writer: &mut dyn Write) -> io::Result<()> {
        let Some(job) = self.job.as_mut() else { return Ok(()) };
        if job.awaiting_verdict.is_some() {
            return Ok(());
        }
        let tried = job.keys_tried();
        let message = match job.checkpoint() {
            Some(c) if job.reported.as_ref() != Some(&c) && tried > 0 => {
                job.reported = Some(c.clone());
                Message::progress(&job.job_id, &c, tried)
            }
            _ => Message::progress(
                &job.job_id,
                job.reported.as_ref().unwrap_or(job.range.first()),
                0,
            ),
        };
        write_message(writer, &message)
    }

    /// Stops and joins every lane, folding in their final counts.
    fn halt_job(&mut self) {
        let Some(job) = self.job.as_ref() else { return };
        job.stop.store(true, Ordering::SeqCst);
        while self.job.as_ref().is_some_and(|j| j.running()) {
            match self.events_rx.recv_timeout(Duration::from_secs(5)) {
                Ok(Event::Lane { lane, update }) => self.lane_update(lane, update),
                Ok(_) => {}
                Err(_) => break,
            }
        }
        self.job = None;
    }
}

/// `host-xxxxxx`, for agents not given an id.
pub fn default_agent_id() -> String {
    use rand::Rng;
    let host = std::env::var("HOSTNAME")
        .ok()
        .filter(|h| !h.is_empty())
        .or_else(|| std::fs::read_to_string("/etc/hostname").ok().map(|h| h.trim().to_string()))
        .filter(|h| !h.is_empty())
        .unwrap_or_else(|| "agent".into());
    let host: String = host
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '-' })
        .collect();
    format!("{host}-{:06x}", rand::thread_rng().gen::<u32>() & 0xff_ffff)
}
