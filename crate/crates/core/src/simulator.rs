//! In-process cluster: one arbiter and `n` agents over loopback TCP or
//! in-memory pipes, with a planted key, scripted agent deaths and an optional
//! arbiter crash and restart.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};
use num_bigint::BigUint;
use num_traits::{ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{rate_probe, run_agent, AgentConfig, AgentExit, AgentReport, TriedInterval};
use crate::cipher::{registry_lookup, Block, CipherSpec, KnownPair};
use crate::coordinator::{
    recover, spawn, AssignmentState, CoordinatorError, Journal, JobConfig, Ledger,
    Outcome, ServeExit, ServeOptions, Strategy,
};
use crate::keyspace::{space_size, KeyRange, KeyValue};
use crate::timeline::{Timeline, TimelineEntry, TimelineEvent};
use crate::transport::{Connector, Listener};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Coordinator(#[from] CoordinatorError),
    #[error("agent failed: {0}")]
    Agent(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    #[default]
    Tcp,
    Memory,
}

/// The key the pairs are made under.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Planted {
    /// Drawn from the seed.
    #[default]
    Random,
    /// Pairs come from a key outside the searched space, so the run ends NotFound.
    Absent,
    Key(String),
}

impl Serialize for Planted {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Planted::Random => s.serialize_str("random"),
            Planted::Absent => s.serialize_str("absent"),
            Planted::Key(k) => s.serialize_str(k),
        }
    }
}

impl<'de> Deserialize<'de> for Planted {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = Option::<String>::deserialize(d)?;
        Ok(match s.as_deref() {
            None | Some("absent") => Planted::Absent,
            Some("random") => Planted::Random,
            Some(k) => Planted::Key(k.to_string()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChurnEvent {
    pub agent_index: usize,
    /// Share of the agent's fair `2^u / n` work done before it dies.
    pub kill_at_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimStrategy {
    /// One range per agent.
    Static,
    Chunked {
        /// Defaults to `2^u / (16 n)`.
        #[serde(default)]
        chunk_keys: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub cipher_id: String,
    pub effective_key_bits: u32,
    pub n_agents: usize,
    pub strategy: SimStrategy,
    #[serde(default)]
    pub planted_key: Planted,
    #[serde(default)]
    pub churn_plan: Vec<ChurnEvent>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    /// Keys per second per agent.
    #[serde(default)]
    pub rate_limit: Option<f64>,
    #[serde(default = "default_lease_ms")]
    pub lease_timeout_ms: u64,
    #[serde(default = "default_progress_ms")]
    pub progress_interval_ms: u64,
    #[serde(default)]
    pub transport: TransportKind,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Kill the arbiter once this share of the space is checkpointed, then
    /// restart it from its journal.
    #[serde(default)]
    pub coordinator_crash_at: Option<f64>,
}

fn default_pairs() -> usize {
    2
}
fn default_lease_ms() -> u64 {
    2_000
}
fn default_progress_ms() -> u64 {
    500
}
fn default_parallelism() -> usize {
    1
}

impl Scenario {
    pub fn new(cipher_id: &str, effective_key_bits: u32, n_agents: usize, strategy: SimStrategy) -> Self {
        Self {
            cipher_id: cipher_id.to_string(),
            effective_key_bits,
            n_agents,
            strategy,
            planted_key: Planted::Random,
            churn_plan: Vec::new(),
            seed: 0,
            pairs: default_pairs(),
            rate_limit: None,
            lease_timeout_ms: default_lease_ms(),
            progress_interval_ms: default_progress_ms(),
            transport: TransportKind::Tcp,
            parallelism: default_parallelism(),
            coordinator_crash_at: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| SimError::InvalidScenario(e.to_string()))
    }

    /// The searched cipher, restricted to the effective width.
    pub fn cipher(&self) -> Result<CipherSpec> {
        let base = registry_lookup(&self.cipher_id).map_err(|e| SimError::InvalidScenario(e.to_string()))?;
        if base.key_bits() == self.effective_key_bits {
            return Ok(base);
        }
        base.restrict_key(self.effective_key_bits)
            .map_err(|e| SimError::InvalidScenario(e.to_string()))
    }

    pub fn validate(&self) -> Result<CipherSpec> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        let spec = self.cipher()?;
        let u = self.effective_key_bits;
        if self.n_agents == 0 || self.n_agents > 1000 {
            return bad(format!("n_agents {} outside 1..=1000", self.n_agents));
        }
        if BigUint::from(self.n_agents) > space_size(u) {
            return bad(format!("{} agents for a 2^{u} space", self.n_agents));
        }
        if self.pairs == 0 {
            return bad("at least one pair is needed".into());
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1".into());
        }
        if self.rate_limit.is_some_and(|r| r.is_nan() || r <= 0.0) {
            return bad("rate_limit must be positive".into());
        }
        if self.lease_timeout_ms == 0 || self.progress_interval_ms == 0 {
            return bad("lease and progress intervals must be positive".into());
        }
        for c in &self.churn_plan {
            if c.agent_index >= self.n_agents {
                return bad(format!("churn names agent {} of {}", c.agent_index, self.n_agents));
            }
            if !(0.0..1.0).contains(&c.kill_at_fraction) {
                return bad(format!("kill fraction {} outside [0, 1)", c.kill_at_fraction));
            }
        }
        if self.churn_plan.len() >= self.n_agents {
            return bad("churn must leave at least one agent alive".into());
        }
        if let Some(f) = self.coordinator_crash_at {
            if !(0.0..1.0).contains(&f) {
                return bad(format!("crash fraction {f} outside [0, 1)"));
            }
        }
        match &self.planted_key {
            Planted::Key(k) => {
                KeyValue::from_hex(k, u).map_err(|e| SimError::InvalidScenario(e.to_string()))?;
            }
            Planted::Absent if u == registry_parent(&spec)?.key_bits() => {
                return bad("an absent key needs a restricted cipher".into());
            }
            _ => {}
        }
        if let SimStrategy::Chunked { chunk_keys: Some(0) } = self.strategy {
            return bad("chunk_keys must be positive".into());
        }
        Ok(spec)
    }

    pub fn strategy(&self) -> Strategy {
        match self.strategy {
            SimStrategy::Static => Strategy::Static {
                n: self.n_agents as u64,
            },
            SimStrategy::Chunked { chunk_keys } => Strategy::Chunked {
                chunk_keys: chunk_keys.unwrap_or_else(|| {
                    let per = space_size(self.effective_key_bits) / BigUint::from(16 * self.n_agents as u64);
                    per.to_u64().unwrap_or(u64::MAX).max(1)
                }),
            },
        }
    }
}

fn registry_parent(spec: &CipherSpec) -> Result<CipherSpec> {
    let base = spec.id().split("-r").next().unwrap_or(spec.id());
    registry_lookup(base).map_err(|e| SimError::InvalidScenario(e.to_string()))
}

/// Known pairs for the scenario, and the key they were made under when that
/// key lies in the searched space.
pub fn make_pairs(scenario: &Scenario, spec: &CipherSpec) -> Result<(Vec<KnownPair>, Option<KeyValue>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let u = scenario.effective_key_bits;
    let random_below = |rng: &mut ChaCha8Rng, bits: u32| -> KeyValue {
        let m = num_bigint::RandBigInt::gen_biguint(rng, bits as u64);
        KeyValue::new(m, bits).expect("drawn below 2^bits")
    };
    let (maker, key, planted) = match &scenario.planted_key {
        Planted::Random => {
            let k = random_below(&mut rng, u);
            (spec.clone(), k.clone(), Some(k))
        }
        Planted::Key(hex) => {
            let k = KeyValue::from_hex(hex, u).map_err(|e| SimError::InvalidScenario(e.to_string()))?;
            (spec.clone(), k.clone(), Some(k))
        }
        Planted::Absent => {
            let parent = registry_parent(spec)?;
            let w = parent.key_bits();
            // force a bit above the searched width
            let mut m = random_below(&mut rng, w).magnitude().clone();
            m.set_bit(rng.gen_range(u..w) as u64, true);
            (parent, KeyValue::new(m, w).expect("within parent width"), None)
        }
    };
    let bb = spec.block_bits();
    let mut pairs = Vec::new();
    while pairs.len() < scenario.pairs {
        let pt = Block::new(random_below(&mut rng, bb));
        if pairs.iter().any(|p: &KnownPair| p.plaintext == pt) {
            continue;
        }
        pairs.push(maker.make_pair(&pt, &key).map_err(|e| SimError::InvalidScenario(e.to_string()))?);
    }
    Ok((pairs, planted))
}

#[derive(Debug, Clone, Serialize)]
pub struct AgentSummary {
    pub agent_id: String,
    pub keys_tried: u64,
    pub assignments: u64,
    pub exit: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub cipher_id: String,
    pub key_bits: u32,
    pub n_agents: usize,
    /// `found` or `not_found`.
    pub outcome: String,
    pub key: Option<String>,
    pub planted_key: Option<String>,
    pub wall_time_s: f64,
    pub agents: Vec<AgentSummary>,
    pub total_keys_tried: u64,
    /// Keys tried more than once across the whole run.
    pub duplicate_keys_tried: u64,
    /// Keys of finished assignments that no agent actually tried.
    pub lost_keys: u64,
    pub coordinator_restarts: u32,
    /// Keys per second per agent used for the churn and crash bounds.
    pub rate_keys_per_s: f64,
    pub lease_timeout_s: f64,
    pub progress_interval_s: f64,
    pub timeline: Vec<TimelineEntry>,
}

impl RunReport {
    pub fn found(&self) -> bool {
        self.outcome == "found"
    }

    pub fn per_agent(&self) -> Vec<u64> {
        self.agents.iter().map(|a| a.keys_tried).collect()
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} u={} agents={} outcome={} key={} planted={} wall={:.3}s",
            self.cipher_id,
            self.key_bits,
            self.n_agents,
            self.outcome,
            self.key.as_deref().unwrap_or("-"),
            self.planted_key.as_deref().unwrap_or("-"),
            self.wall_time_s
        );
        let _ = writeln!(out, "{:<16} {:>14} {:>11}  exit", "agent", "keys_tried", "assignments");
        for a in &self.agents {
            let _ = writeln!(out, "{:<16} {:>14} {:>11}  {}", a.agent_id, a.keys_tried, a.assignments, a.exit);
        }
        let _ = writeln!(
            out,
            "total {}  duplicates {}  lost {}  restarts {}",
            self.total_keys_tried, self.duplicate_keys_tried, self.lost_keys, self.coordinator_restarts
        );
        out
    }
}

/// Sorted, merged key intervals.
#[derive(Debug, Default, Clone)]
struct Coverage(Vec<(BigUint, BigUint)>);

impl Coverage {
    fn from_tried(tried: &[TriedInterval]) -> Self {
        let mut v: Vec<(BigUint, BigUint)> = tried
            .iter()
            .map(|t| (t.range.first().magnitude().clone(), t.range.last().magnitude().clone()))
            .collect();
        v.sort();
        let mut merged: Vec<(BigUint, BigUint)> = Vec::new();
        for (a, b) in v {
            match merged.last_mut() {
                Some((_, hi)) if a <= &*hi + 1u32 => {
                    if b > *hi {
                        *hi = b;
                    }
                }
                _ => merged.push((a, b)),
            }
        }
        Coverage(merged)
    }

    fn size(&self) -> BigUint {
        self.0.iter().map(|(a, b)| b - a + 1u32).sum()
    }

    /// Keys of `[lo, hi]` not covered.
    fn missing(&self, range: &KeyRange) -> BigUint {
        let (lo, hi) = (range.first().magnitude(), range.last().magnitude());
        let mut covered = BigUint::zero();
        for (a, b) in &self.0 {
            let s = a.max(lo);
            let e = b.min(hi);
            if s <= e {
                covered += e - s + 1u32;
            }
        }
        range.size() - covered
    }
}

/// Runs one scenario to completion.
pub fn run_scenario(scenario: &Scenario) -> Result<RunReport> {
    let spec = scenario.validate()?;
    let (pairs, planted) = make_pairs(scenario, &spec)?;
    let u = scenario.effective_key_bits;
    let n = scenario.n_agents;
    let lease = Duration::from_millis(scenario.lease_timeout_ms);
    let progress = Duration::from_millis(scenario.progress_interval_ms);
    let mut config = JobConfig::new(spec.id(), u, pairs, scenario.strategy());
    config.lease_timeout = lease;
    config.progress_interval = progress;

    let journal_dir = scenario
        .coordinator_crash_at
        .map(|_| tempfile::Builder::new().prefix("keysweep-sim").tempdir())
        .transpose()?;
    let journal_path: Option<PathBuf> = journal_dir.as_ref().map(|d| d.path().join("journal.ndjson"));

    let mut ledger = Ledger::start_job(config)?;
    if let Some(p) = &journal_path {
        ledger.start_journal(Journal::create(p)?)?;
    }

    let (listener, connector) = match scenario.transport {
        TransportKind::Tcp => {
            let l = Listener::bind("127.0.0.1:0")?;
            let c = l.connector().expect("tcp listener has an address");
            (l, c)
        }
        TransportKind::Memory => Listener::memory(),
    };
    let timeline = Timeline::new();
    let status = Arc::new(Mutex::new(ledger.status()));
    let options = || ServeOptions {
        status_interval: None,
        timeline: Some(timeline.clone()),
        status: Some(Arc::clone(&status)),
        ..ServeOptions::default()
    };
    let started = Instant::now();
    let mut coordinator = spawn(ledger, listener, options());

    let rate = match scenario.rate_limit {
        Some(r) => r,
        None => rate_probe(&spec, Duration::from_millis(100)),
    };
    let fair_share = (space_size(u) / BigUint::from(n as u64)).to_f64().unwrap_or(f64::MAX);
    let interrupt = Arc::new(AtomicBool::new(false));
    let mut agents = Vec::with_capacity(n);
    for i in 0..n {
        let agent_id = format!("agent-{i:03}");
        let mut cfg = AgentConfig::new(&agent_id);
        cfg.parallelism = scenario.parallelism;
        cfg.rate_limit = scenario.rate_limit;
        cfg.rate_hint = Some(rate);
        cfg.progress_every = progress / 2;
        cfg.backoff_initial = Duration::from_millis(20);
        cfg.backoff_max = Duration::from_millis(500);
        cfg.give_up_after = Some(Duration::from_secs(20));
        cfg.interrupt = Arc::clone(&interrupt);
        cfg.timeline = Some(timeline.clone());
        cfg.die_after_keys = scenario
            .churn_plan
            .iter()
            .find(|c| c.agent_index == i)
            .map(|c| (c.kill_at_fraction * fair_share).floor() as u64);
        let conn = connector.clone();
        agents.push(thread::spawn(move || run_agent(&conn, cfg)));
        // one at a time, so assignment order follows agent order
        let seen = timeline.wait_for(Duration::from_secs(10), |e| match e {
            TimelineEvent::Assigned { agent_id: a, .. } | TimelineEvent::Parked { agent_id: a } => *a == agent_id,
            TimelineEvent::Finished { .. } => true,
            _ => false,
        });
        if !seen {
            warn!("{agent_id} got no answer to its hello");
        }
    }

    let mut restarts = 0;
    if let (Some(fraction), Some(path)) = (scenario.coordinator_crash_at, &journal_path) {
        let total = space_size(u).to_f64().unwrap_or(f64::MAX);
        while !coordinator.is_finished() {
            let searched = status.lock().unwrap().searched_keys.to_f64().unwrap_or(0.0);
            if searched / total < fraction {
                thread::sleep(Duration::from_millis(5));
                continue;
            }
            info!("killing the arbiter at {:.1}%", 100.0 * searched / total);
            coordinator.kill();
            let report = coordinator.join()?;
            if report.exit != ServeExit::Killed {
                // it finished on its own first
                coordinator = spawn_finished(report);
                break;
            }
            timeline.push(TimelineEvent::CoordinatorStopped { how: "crash".into() });
            let (ledger, recovery) = recover(path)?;
            info!("recovered from {} journal records", recovery.records_applied);
            *status.lock().unwrap() = ledger.status();
            let listener = match &connector {
                Connector::Tcp(addr) => Listener::bind(addr.as_str())?,
                Connector::Memory(m) => m.rebind(),
            };
            coordinator = spawn(ledger, listener, options());
            restarts += 1;
            break;
        }
    }

    let report = coordinator.join()?;
    let wall = started.elapsed();
    // stragglers: parked agents already got Stop; anyone still retrying quits
    let deadline = Instant::now() + Duration::from_secs(5);
    while agents.iter().any(|h| !h.is_finished()) && Instant::now() < deadline {
        thread::sleep(Duration::from_millis(5));
    }
    interrupt.store(true, Ordering::SeqCst);
    let mut reports: Vec<AgentReport> = Vec::with_capacity(n);
    for h in agents {
        match h.join() {
            Ok(Ok(r)) => reports.push(r),
            Ok(Err(e)) => return Err(SimError::Agent(e.to_string())),
            Err(_) => return Err(SimError::Agent("agent thread panicked".into())),
        }
    }

    let all_tried: Vec<TriedInterval> = reports.iter().flat_map(|r| r.tried.iter().cloned()).collect();
    let coverage = Coverage::from_tried(&all_tried);
    let total_tried: u64 = reports.iter().map(|r| r.keys_tried).sum();
    let duplicates = (BigUint::from(total_tried) - coverage.size().min(BigUint::from(total_tried)))
        .to_u64()
        .unwrap_or(u64::MAX);
    let lost = report
        .ledger
        .assignments()
        .iter()
        .filter(|a| a.state == AssignmentState::Exhausted)
        .map(|a| coverage.missing(&a.range))
        .sum::<BigUint>()
        .to_u64()
        .unwrap_or(u64::MAX);

    let (outcome, key) = match &report.exit {
        ServeExit::Finished(Outcome::Found(k)) => ("found", Some(k.to_hex())),
        ServeExit::Finished(Outcome::NotFound) => ("not_found", None),
        other => {
            return Err(SimError::Agent(format!("arbiter ended without a result: {other:?}")));
        }
    };
    Ok(RunReport {
        cipher_id: spec.id().to_string(),
        key_bits: u,
        n_agents: n,
        outcome: outcome.into(),
        key,
        planted_key: planted.map(|k| k.to_hex()),
        wall_time_s: wall.as_secs_f64(),
        agents: reports
            .iter()
            .map(|r| AgentSummary {
                agent_id: r.agent_id.clone(),
                keys_tried: r.keys_tried,
                assignments: r.assignments,
                exit: exit_label(&r.exit),
            })
            .collect(),
        total_keys_tried: total_tried,
        duplicate_keys_tried: duplicates,
        lost_keys: lost,
        coordinator_restarts: restarts,
        rate_keys_per_s: rate,
        lease_timeout_s: lease.as_secs_f64(),
        progress_interval_s: progress.as_secs_f64(),
        timeline: timeline.snapshot(),
    })
}

fn exit_label(exit: &AgentExit) -> String {
    match exit {
        AgentExit::Stopped(r) => format!("stopped:{}", format!("{r:?}").to_lowercase()),
        AgentExit::Died => "died".into(),
        AgentExit::Interrupted => "interrupted".into(),
        AgentExit::Refused(why) => format!("refused:{why}"),
        AgentExit::GaveUp => "gave_up".into(),
    }
}

/// A handle whose join yields `report` again; a ledger that already has an
/// outcome makes the server return at once.
fn spawn_finished(report: crate::coordinator::ServeReport) -> crate::coordinator::CoordinatorHandle {
    let (listener, _) = Listener::memory();
    spawn(report.ledger, listener, ServeOptions::default())
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub n: usize,
    pub total_work: u64,
    pub per_agent_max_work: u64,
    pub per_agent_min_work: u64,
    pub wall_time_s: f64,
}

/// Runs `base` once per agent count. Meant for NotFound scenarios, where every
/// key is tried.
pub fn scaling_sweep(base: &Scenario, agent_counts: &[usize]) -> Result<Vec<SweepRow>> {
    agent_counts
        .iter()
        .map(|&n| {
            let mut s = base.clone();
            s.n_agents = n;
            let r = run_scenario(&s)?;
            let per = r.per_agent();
            Ok(SweepRow {
                n,
                total_work: r.total_keys_tried,
                per_agent_max_work: per.iter().copied().max().unwrap_or(0),
                per_agent_min_work: per.iter().copied().min().unwrap_or(0),
                wall_time_s: r.wall_time_s,
            })
        })
        .collect()
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = format!("{:>6} {:>14} {:>14} {:>14} {:>10}\n", "n", "total", "max/agent", "min/agent", "wall_s");
    for r in rows {
        let _ = writeln!(
            out,
            "{:>6} {:>14} {:>14} {:>14} {:>10.3}",
            r.n, r.total_work, r.per_agent_max_work, r.per_agent_min_work, r.wall_time_s
        );
    }
    out
}
