//! Network front end of the arbiter.
//!
//! One owner thread holds the [`Ledger`] and applies every mutation. An accept
//! thread and per-connection reader threads feed it events over a channel;
//! per-connection writer threads drain outgoing messages so the owner never
//! blocks on a socket.

use std::collections::HashMap;
use std::io::Write as _;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use num_traits::ToPrimitive;

use super::ledger::{Ledger, LedgerEvent, LedgerStatus, Outbound, Outcome, Recipient};
use super::CoordinatorError;
use crate::protocol::{write_message, Message, MessageReader, ProtocolError};
use crate::timeline::{Timeline, TimelineEvent};
use crate::transport::{Closer, Connection, Listener};

/// How long a finished coordinator waits for agents to hang up after Stop.
const CLOSE_GRACE: Duration = Duration::from_secs(2);
const POLL: Duration = Duration::from_millis(20);
const SNAPSHOT_EVERY: Duration = Duration::from_millis(10);

#[derive(Debug, Clone)]
pub struct ServeOptions {
    /// Period of the progress line on stderr; `None` disables it.
    pub status_interval: Option<Duration>,
    pub timeline: Option<Timeline>,
    /// Set to stop after closing connections; the journal is left complete.
    pub shutdown: Arc<AtomicBool>,
    /// Set to vanish abruptly: no stop messages, no further journal writes.
    pub kill: Arc<AtomicBool>,
    /// Refreshed snapshot of the ledger status for outside observers.
    pub status: Option<Arc<Mutex<LedgerStatus>>>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            status_interval: None,
            timeline: None,
            shutdown: Arc::new(AtomicBool::new(false)),
            kill: Arc::new(AtomicBool::new(false)),
            status: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServeExit {
    Finished(Outcome),
    Interrupted,
    Killed,
}

#[derive(Debug)]
pub struct ServeReport {
    pub exit: ServeExit,
    pub ledger: Ledger,
    pub elapsed: Duration,
}

enum Event {
    Connected {
        conn: u64,
        peer: String,
        tx: Sender<WriterCmd>,
        closer: Closer,
    },
    Received {
        conn: u64,
        message: Result<Message, ProtocolError>,
    },
    Disconnected {
        conn: u64,
    },
}

enum WriterCmd {
    Send(Message),
    /// Flush and half-close; the reader keeps running until the peer hangs up.
    Finish,
}

struct Peer {
    tx: Sender<WriterCmd>,
    closer: Closer,
    agent_id: Option<String>,
}

#[derive(Default)]
struct Threads(Mutex<Vec<JoinHandle<()>>>);

impl Threads {
    fn add(&self, handle: JoinHandle<()>) {
        self.0.lock().unwrap().push(handle);
    }

    fn join_all(&self) {
        let handles = std::mem::take(&mut *self.0.lock().unwrap());
        for h in handles {
            let _ = h.join();
        }
    }
}

/// Runs the arbiter until the job ends, or until `shutdown`/`kill` is raised.
pub fn serve(
    ledger: Ledger,
    listener: Listener,
    options: ServeOptions,
) -> Result<ServeReport, CoordinatorError> {
    let started = Instant::now();
    let (events_tx, events_rx) = mpsc::channel();
    let threads = Arc::new(Threads::default());
    let stop_accept = Arc::new(AtomicBool::new(false));
    let acceptor = {
        let threads = Arc::clone(&threads);
        let stop = Arc::clone(&stop_accept);
        thread::Builder::new()
            .name("accept".into())
            .spawn(move || accept_loop(listener, events_tx, threads, stop))?
    };

    let mut owner = Owner {
        ledger,
        peers: HashMap::new(),
        agents: HashMap::new(),
        options,
        started,
        last_status: started,
        last_snapshot: None,
    };
    let result = owner.run(&events_rx);

    stop_accept.store(true, Ordering::SeqCst);
    let _ = acceptor.join();
    // whatever is still open goes now, including connections never seen
    for peer in owner.peers.values() {
        peer.closer.close();
    }
    drop(owner.peers);
    for event in events_rx.try_iter() {
        if let Event::Connected { closer, .. } = event {
            closer.close();
        }
    }
    drop(events_rx);
    threads.join_all();
    let exit = result?;
    if let Some(t) = &owner.options.timeline {
        t.push(TimelineEvent::CoordinatorStopped {
            how: format!("{exit:?}"),
        });
    }
    Ok(ServeReport {
        exit,
        ledger: owner.ledger,
        elapsed: started.elapsed(),
    })
}

fn accept_loop(
    listener: Listener,
    events: Sender<Event>,
    threads: Arc<Threads>,
    stop: Arc<AtomicBool>,
) {
    let mut next_conn = 0u64;
    while !stop.load(Ordering::SeqCst) {
        let conn = match listener.accept_timeout(POLL) {
            Ok(Some(conn)) => conn,
            Ok(None) => continue,
            Err(e) => {
                warn!("accept failed: {e}");
                thread::sleep(POLL);
                continue;
            }
        };
        next_conn += 1;
        let id = next_conn;
        let Connection {
            reader,
            mut writer,
            closer,
            peer,
        } = conn;
        debug!("connection {id} from {peer}");
        let (tx, rx) = mpsc::channel::<WriterCmd>();
        let writer_closer = closer.clone();
        threads.add(thread::spawn(move || {
            while let Ok(cmd) = rx.recv() {
                match cmd {
                    WriterCmd::Send(m) => {
                        if write_message(&mut writer, &m).is_err() {
                            writer_closer.close();
                            return;
                        }
                    }
                    WriterCmd::Finish => {
                        let _ = writer.flush();
                        writer_closer.close_write();
                        return;
                    }
                }
            }
        }));
        if events
            .send(Event::Connected {
                conn: id,
                peer,
                tx,
                closer: closer.clone(),
            })
            .is_err()
        {
            closer.close();
            return;
        }
        let events = events.clone();
        threads.add(thread::spawn(move || {
            let mut reader = MessageReader::new(reader);
            loop {
                match reader.next_message() {
                    Ok(Some(message)) => {
                        if events
                            .send(Event::Received {
                                conn: id,
                                message: Ok(message),
                            })
                            .is_err()
                        {
                            break;
                        }
                    }
                    Ok(None) | Err(ProtocolError::Io(_)) => break,
                    Err(e) => {
                        let _ = events.send(Event::Received {
                            conn: id,
                            message: Err(e),
                        });
                    }
                }
            }
            let _ = events.send(Event::Disconnected { conn: id });
        }));
    }
}

struct Owner {
    ledger: Ledger,
    peers: HashMap<u64, Peer>,
    agents: HashMap<String, u64>,
    options: ServeOptions,
    started: Instant,
    last_status: Instant,
    last_snapshot: Option<Instant>,
}

impl Owner {
    fn run(&mut self, events: &Receiver<Event>) -> Result<ServeExit, CoordinatorError> {
        let lease = self.ledger.config().lease_timeout;
        let reap_every = (lease / 3).max(Duration::from_millis(10));
        let mut next_reap = Instant::now() + reap_every;
        let mut finished_at: Option<Instant> = None;
        self.publish_events();
        if self.ledger.outcome().is_some() {
            finished_at = Some(Instant::now());
        }
        loop {
            if self.options.kill.load(Ordering::SeqCst) {
                info!("coordinator killed");
                for peer in self.peers.values() {
                    peer.closer.close();
                }
                return Ok(ServeExit::Killed);
            }
            if self.options.shutdown.load(Ordering::SeqCst) {
                info!("coordinator shutting down; journal is complete");
                for peer in self.peers.values() {
                    peer.closer.close();
                }
                return Ok(ServeExit::Interrupted);
            }
            if let Some(at) = finished_at {
                if self.peers.is_empty() || at.elapsed() >= CLOSE_GRACE {
                    let outcome = self.ledger.outcome().cloned().expect("finished");
                    return Ok(ServeExit::Finished(outcome));
                }
            }

            match events.recv_timeout(POLL) {
                Ok(event) => self.handle(event)?,
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(CoordinatorError::Io(std::io::Error::other(
                        "accept loop ended",
                    )))
                }
            }

            let now = Instant::now();
            if finished_at.is_none() && now >= next_reap {
                next_reap = now + reap_every;
                let (requeued, out) = self.ledger.reap_leases(now)?;
                for r in &requeued {
                    info!("requeued {r}");
                }
                self.route(out);
            }
            self.publish_events();
            self.snapshot(now);
            if finished_at.is_none() {
                if self.ledger.outcome().is_some() {
                    finished_at = Some(now);
                    // peers learn of the end through the Stop already queued
                    for peer in self.peers.values() {
                        let _ = peer.tx.send(WriterCmd::Finish);
                    }
                }
                self.maybe_status(now);
            }
        }
    }

    fn handle(&mut self, event: Event) -> Result<(), CoordinatorError> {
        let now = Instant::now();
        match event {
            Event::Connected {
                conn,
                peer,
                tx,
                closer,
            } => {
                debug!("peer {conn} is {peer}");
                if self.ledger.outcome().is_some() {
                    let _ = tx.send(WriterCmd::Send(self.stop_for_outcome()));
                    let _ = tx.send(WriterCmd::Finish);
                }
                self.peers.insert(
                    conn,
                    Peer {
                        tx,
                        closer,
                        agent_id: None,
                    },
                );
            }
            Event::Disconnected { conn } => {
                if let Some(peer) = self.peers.remove(&conn) {
                    peer.closer.close();
                    if let Some(agent) = peer.agent_id {
                        self.agents.remove(&agent);
                        let out = self.ledger.agent_disconnected(&agent, now)?;
                        self.route(out);
                    }
                }
            }
            Event::Received { conn, message } => match message {
                Ok(m) => self.dispatch(conn, m, now)?,
                Err(e) => {
                    warn!("bad message on connection {conn}: {e}");
                    self.send_to_conn(conn, Message::error("protocol", e.to_string()));
                }
            },
        }
        Ok(())
    }

    fn dispatch(&mut self, conn: u64, message: Message, now: Instant) -> Result<(), CoordinatorError> {
        let bound = self.peers.get(&conn).and_then(|p| p.agent_id.clone());
        if let Message::Hello {
            agent_id,
            rate_hint,
        } = &message
        {
            if let Some(&other) = self.agents.get(agent_id) {
                if other != conn {
                    self.send_to_conn(
                        conn,
                        Message::error("duplicate_agent", format!("{agent_id} is already connected")),
                    );
                    return Ok(());
                }
            }
            if let Some(old) = &bound {
                if old != agent_id {
                    self.agents.remove(old);
                    let out = self.ledger.agent_disconnected(old, now)?;
                    self.route(out);
                }
            }
            info!("hello from {agent_id} (rate hint {rate_hint:?})");
            self.agents.insert(agent_id.clone(), conn);
            if let Some(p) = self.peers.get_mut(&conn) {
                p.agent_id = Some(agent_id.clone());
            }
            let out = self.ledger.handle_hello(agent_id, now)?;
            self.route(out);
            return Ok(());
        }
        let Some(agent) = bound else {
            self.send_to_conn(conn, Message::error("no_hello", "send hello first"));
            return Ok(());
        };
        let result = match &message {
            Message::Progress {
                job_id,
                current_key,
                keys_tried,
            } => self
                .ledger
                .handle_progress(&agent, job_id, current_key, *keys_tried, now)
                .map(|()| Vec::new()),
            Message::Found { job_id, key } => self.ledger.handle_found(&agent, job_id, key, now),
            Message::Exhausted { job_id } => self.ledger.handle_exhausted(&agent, job_id, now),
            Message::Error { code, detail } => {
                warn!("agent {agent} reports {code}: {detail}");
                Ok(Vec::new())
            }
            other => {
                self.send_to_conn(
                    conn,
                    Message::error("unexpected", format!("{} is not sent by agents", other.kind())),
                );
                Ok(Vec::new())
            }
        };
        match result {
            Ok(out) => self.route(out),
            Err(e) if e.is_fatal() => return Err(e),
            Err(e) => {
                debug!("{agent}: {e}");
                self.send_to_conn(conn, Message::error(e.wire_code(), e.to_string()));
            }
        }
        Ok(())
    }

    fn route(&mut self, out: Vec<Outbound>) {
        for Outbound { to, message } in out {
            match to {
                Recipient::All => {
                    for peer in self.peers.values() {
                        let _ = peer.tx.send(WriterCmd::Send(message.clone()));
                    }
                }
                Recipient::Agent(agent) => match self.agents.get(&agent) {
                    Some(&conn) => self.send_to_conn(conn, message),
                    None => debug!("dropping {} for departed {agent}", message.kind()),
                },
            }
        }
    }

    fn send_to_conn(&self, conn: u64, message: Message) {
        if let Some(peer) = self.peers.get(&conn) {
            let _ = peer.tx.send(WriterCmd::Send(message));
        }
    }

    fn stop_for_outcome(&self) -> Message {
        use crate::protocol::StopReason;
        match self.ledger.outcome() {
            Some(Outcome::Found(_)) => Message::stop(StopReason::Found),
            _ => Message::stop(StopReason::Shutdown),
        }
    }

    fn publish_events(&mut self) {
        let events = self.ledger.drain_events();
        let Some(timeline) = &self.options.timeline else {
            return;
        };
        for e in events {
            timeline.push(match e {
                LedgerEvent::Activated {
                    job_id,
                    agent_id,
                    range,
                } => TimelineEvent::Assigned {
                    job_id,
                    agent_id,
                    first_key: range.first().to_hex(),
                    last_key: range.last().to_hex(),
                },
                LedgerEvent::Parked { agent_id } => TimelineEvent::Parked { agent_id },
                LedgerEvent::Exhausted { job_id, agent_id } => {
                    TimelineEvent::Exhausted { job_id, agent_id }
                }
                LedgerEvent::Released {
                    job_id,
                    agent_id,
                    reason,
                    requeued,
                } => TimelineEvent::Released {
                    job_id,
                    agent_id,
                    reason: format!("{reason:?}"),
                    requeued: requeued.map(|r| r.to_string()),
                },
                LedgerEvent::ClaimRejected {
                    job_id,
                    agent_id,
                    key,
                } => TimelineEvent::ClaimRejected {
                    job_id,
                    agent_id,
                    key,
                },
                LedgerEvent::Found {
                    job_id,
                    agent_id,
                    key,
                } => TimelineEvent::Found {
                    job_id,
                    agent_id,
                    key: key.to_hex(),
                },
                LedgerEvent::Finished(o) => TimelineEvent::Finished {
                    outcome: match o {
                        Outcome::Found(k) => format!("found {k}"),
                        Outcome::NotFound => "not_found".into(),
                    },
                },
            });
        }
    }

    fn snapshot(&mut self, now: Instant) {
        let Some(slot) = &self.options.status else {
            return;
        };
        if self
            .last_snapshot
            .is_some_and(|t| now.duration_since(t) < SNAPSHOT_EVERY)
        {
            return;
        }
        self.last_snapshot = Some(now);
        *slot.lock().unwrap() = self.ledger.status();
    }

    fn maybe_status(&mut self, now: Instant) {
        let Some(every) = self.options.status_interval else {
            return;
        };
        if now.duration_since(self.last_status) < every {
            return;
        }
        self.last_status = now;
        let s = self.ledger.status();
        let searched = s.searched_keys.to_f64().unwrap_or(f64::MAX);
        let total = s.total_keys.to_f64().unwrap_or(f64::MAX);
        let elapsed = now.duration_since(self.started).as_secs_f64();
        let rate = searched / elapsed.max(1e-9);
        let eta = if rate > 0.0 {
            format!("{:.0}s", (total - searched) / rate)
        } else {
            "unknown".into()
        };
        eprintln!(
            "status: {:.0}/{:.0} keys ({:.2}%), {} active, {} waiting, {:.0} keys/s, eta {}",
            searched,
            total,
            100.0 * searched / total,
            s.active,
            s.unassigned,
            rate,
            eta
        );
    }
}

/// A coordinator running on its own thread.
pub struct CoordinatorHandle {
    thread: Option<JoinHandle<Result<ServeReport, CoordinatorError>>>,
    kill: Arc<AtomicBool>,
    shutdown: Arc<AtomicBool>,
    addr: Option<SocketAddr>,
}

impl CoordinatorHandle {
    pub fn local_addr(&self) -> Option<SocketAddr> {
        self.addr
    }

    /// Drops every connection without a word, as if the process died.
    pub fn kill(&self) {
        self.kill.store(true, Ordering::SeqCst);
    }

    pub fn shutdown(&self) {
        self.shutdown.store(true, Ordering::SeqCst);
    }

    pub fn is_finished(&self) -> bool {
        self.thread.as_ref().is_none_or(|t| t.is_finished())
    }

    pub fn join(mut self) -> Result<ServeReport, CoordinatorError> {
        self.thread
            .take()
            .expect("joined once")
            .join()
            .unwrap_or_else(|_| Err(CoordinatorError::Io(std::io::Error::other("coordinator panicked"))))
    }
}

impl Drop for CoordinatorHandle {
    fn drop(&mut self) {
        if let Some(t) = self.thread.take() {
            self.kill.store(true, Ordering::SeqCst);
            let _ = t.join();
        }
    }
}

pub fn spawn(ledger: Ledger, listener: Listener, options: ServeOptions) -> CoordinatorHandle {
    let addr = listener.local_addr();
    let kill = Arc::clone(&options.kill);
    let shutdown = Arc::clone(&options.shutdown);
    let thread = thread::Builder::new()
        .name("coordinator".into())
        .spawn(move || serve(ledger, listener, options))
        .expect("spawn coordinator thread");
    CoordinatorHandle {
        thread: Some(thread),
        kill,
        shutdown,
        addr,
    }
}
