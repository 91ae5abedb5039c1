//! Command-line front end: one binary, role chosen by subcommand.
//!
//! Every subcommand accepts `--config FILE`, a JSON object whose keys are the
//! subcommand's long flag names. A flag given on the command line beats the
//! same key in the file, which beats the built-in default. For `simulate` the
//! file is a scenario instead.
//!
//! Exit codes: 0 found or success, 1 not found, 2 usage or configuration
//! error, 3 runtime error. Logs go to stderr; the last line on stdout is a
//! JSON summary.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::agent::{default_agent_id, run_agent, AgentConfig, AgentExit};
use crate::cipher::{registry_lookup, Block, CipherSpec, KnownPair};
use crate::coordinator::{
    recover, serve, CoordinatorError, JobConfig, Journal, Ledger, Outcome, ServeExit, ServeOptions,
    Strategy,
};
use crate::crack::crack;
use crate::estimator::{estimate_from_text, Estimate};
use crate::keyspace::KeyValue;
use crate::protocol::{StopReason, DEFAULT_PORT};
use crate::simulator::{
    run_scenario, scaling_sweep, sweep_table, Planted, Scenario, SimStrategy, TransportKind,
};
use crate::transport::{Connector, Listener};

pub const EXIT_FOUND: i32 = 0;
pub const EXIT_NOT_FOUND: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

const DEFAULT_CHUNK_KEYS: u64 = 1 << 20;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<CoordinatorError> for CliError {
    fn from(e: CoordinatorError) -> Self {
        match e {
            CoordinatorError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "keysweep", version, about = "Partitioned exhaustive key search")]
pub struct Cli {
    /// JSON file of defaults for the subcommand's flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the arbiter that hands out key ranges.
    Serve(ServeArgs),
    /// Search key ranges handed out by an arbiter.
    Agent(AgentArgs),
    /// Run an arbiter and agents in one process.
    Simulate(SimulateArgs),
    /// Time to exhaust a key space.
    Estimate(EstimateArgs),
    /// Search the whole key space on this machine.
    Crack(CrackArgs),
    /// Encrypt plaintexts under a chosen key to make known pairs.
    MakePair(MakePairArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Static,
    Chunked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Table,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportArg {
    Tcp,
    Memory,
}

/// Fills unset fields of `self` from `file`.
trait Layer: Sized {
    fn under(self, file: Self) -> Self;
}

macro_rules! layered {
    ($name:ident { $($field:ident),* $(,)? }) => {
        impl Layer for $name {
            fn under(self, file: Self) -> Self {
                Self { $($field: layer_field(self.$field, file.$field)),* }
            }
        }
    };
}

trait Field {
    fn is_unset(&self) -> bool;
}

impl<T> Field for Option<T> {
    fn is_unset(&self) -> bool {
        self.is_none()
    }
}

impl<T> Field for Vec<T> {
    fn is_unset(&self) -> bool {
        self.is_empty()
    }
}

fn layer_field<T: Field>(flag: T, file: T) -> T {
    if flag.is_unset() {
        file
    } else {
        flag
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct ServeArgs {
    /// Address to listen on [default: 0.0.0.0:4160]
    #[arg(long)]
    pub listen: Option<String>,
    /// Cipher id, e.g. speck32_64 or speck32_64-r24.
    #[arg(long)]
    pub cipher: Option<String>,
    /// Key bits to search [default: the cipher's key width]
    #[arg(long)]
    pub key_bits: Option<u32>,
    /// Known pair as PT:CT hex; repeat for more.
    #[arg(long = "pair", value_name = "PT:CT")]
    #[serde(rename = "pair")]
    pub pairs: Vec<String>,
    /// [default: chunked]
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyKind>,
    /// Number of devices for the static strategy.
    #[arg(long)]
    pub devices: Option<u64>,
    /// Keys per chunk for the chunked strategy [default: 1048576]
    #[arg(long)]
    pub chunk_keys: Option<u64>,
    /// Seconds of silence before a range is taken back [default: 30]
    #[arg(long)]
    pub lease_timeout: Option<f64>,
    /// Seconds between agent progress reports [default: 2]
    #[arg(long)]
    pub progress_interval: Option<f64>,
    /// Journal file; an existing journal is resumed.
    #[arg(long)]
    pub journal: Option<PathBuf>,
    /// Seconds between status lines, 0 for none [default: 5]
    #[arg(long)]
    pub status_interval: Option<f64>,
}

layered!(ServeArgs {
    listen, cipher, key_bits, pairs, strategy, devices, chunk_keys, lease_timeout,
    progress_interval, journal, status_interval
});

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct AgentArgs {
    /// Arbiter address [default: 127.0.0.1:4160]
    #[arg(long)]
    pub connect: Option<String>,
    /// Agent id [default: hostname plus a random suffix]
    #[arg(long)]
    pub id: Option<String>,
    /// Search threads [default: available cores]
    #[arg(long)]
    pub threads: Option<usize>,
    /// Keys per second cap for the whole agent.
    #[arg(long)]
    pub rate_limit: Option<f64>,
    /// Keys per second advertised to the arbiter.
    #[arg(long)]
    pub rate_hint: Option<f64>,
    /// Seconds between progress reports [default: 1]
    #[arg(long)]
    pub progress_every: Option<f64>,
    /// Seconds to keep retrying an unreachable arbiter, 0 for ever [default: 30]
    #[arg(long)]
    pub give_up_after: Option<f64>,
}

layered!(AgentArgs { connect, id, threads, rate_limit, rate_hint, progress_every, give_up_after });

#[derive(Debug, Clone, Default, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub cipher: Option<String>,
    #[arg(long)]
    pub key_bits: Option<u32>,
    #[arg(long)]
    pub agents: Option<usize>,
    /// [default: chunked]
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyKind>,
    #[arg(long)]
    pub chunk_keys: Option<u64>,
    /// `random`, `absent`, or a key in hex.
    #[arg(long)]
    pub planted: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of known pairs.
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Keys per second per agent.
    #[arg(long)]
    pub rate_limit: Option<f64>,
    #[arg(long, value_enum)]
    pub transport: Option<TransportArg>,
    /// Kill agent I once it has done FRACTION of a fair share; repeat for more.
    #[arg(long = "kill", value_name = "I@FRACTION")]
    pub kills: Vec<String>,
    /// Run once per agent count instead, e.g. 1,2,4,8.
    #[arg(long, value_delimiter = ',')]
    pub sweep: Vec<usize>,
    /// Write the full run report as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct EstimateArgs {
    /// KEY_BITS DEVICES RATE, as an alternative to the flags.
    #[arg(value_name = "U N R", num_args = 0..=3)]
    #[serde(skip)]
    pub positional: Vec<String>,
    #[arg(long)]
    pub key_bits: Option<String>,
    #[arg(long)]
    pub devices: Option<String>,
    /// Keys per second per device.
    #[arg(long)]
    pub rate: Option<String>,
    /// [default: table]
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

layered!(EstimateArgs { positional, key_bits, devices, rate, format });

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct CrackArgs {
    #[arg(long)]
    pub cipher: Option<String>,
    #[arg(long)]
    pub key_bits: Option<u32>,
    #[arg(long = "pair", value_name = "PT:CT")]
    #[serde(rename = "pair")]
    pub pairs: Vec<String>,
    /// [default: available cores]
    #[arg(long)]
    pub threads: Option<usize>,
}

layered!(CrackArgs { cipher, key_bits, pairs, threads });

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct MakePairArgs {
    #[arg(long)]
    pub cipher: Option<String>,
    #[arg(long)]
    pub key_bits: Option<u32>,
    /// Key in hex.
    #[arg(long)]
    pub key: Option<String>,
    /// Plaintext block in hex; repeat for more [default: two random blocks]
    #[arg(long = "plaintext", value_name = "HEX")]
    #[serde(rename = "plaintext")]
    pub plaintexts: Vec<String>,
    /// Seed for random plaintexts.
    #[arg(long)]
    pub seed: Option<u64>,
}

layered!(MakePairArgs { cipher, key_bits, key, plaintexts, seed });

/// Parses the process arguments, runs the subcommand and returns the exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    init_logging(&cli);
    let stdout = io::stdout();
    match run(cli, &mut stdout.lock()) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            e.exit_code()
        }
    }
}

fn init_logging(cli: &Cli) {
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        (false, _) => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_millis()
        .try_init();
}

/// Runs a parsed command line, writing results to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Serve(a) => cmd_serve(with_file(a, config)?, out),
        Command::Agent(a) => cmd_agent(with_file(a, config)?, out),
        Command::Simulate(a) => cmd_simulate(a, config, out),
        Command::Estimate(a) => cmd_estimate(with_file(a, config)?, out),
        Command::Crack(a) => cmd_crack(with_file(a, config)?, out),
        Command::MakePair(a) => cmd_make_pair(with_file(a, config)?, out),
    }
}

fn with_file<T: Layer + DeserializeOwned>(flags: T, path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(flags);
    };
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let file: T = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(flags.under(file))
}

fn echo(what: &str, resolved: &impl Serialize) {
    info!(
        "{what} config: {}",
        serde_json::to_string(resolved).expect("config serializes")
    );
}

fn finish(out: &mut dyn Write, line: serde_json::Value) -> Result<()> {
    writeln!(out, "{line}").map_err(runtime)
}

fn secs(value: Option<f64>, default: f64, name: &str) -> Result<Duration> {
    let v = value.unwrap_or(default);
    Duration::try_from_secs_f64(v).map_err(|_| usage(format!("--{name} must be a non-negative number of seconds")))
}

fn threads_default() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Looks up `cipher` and narrows it to `key_bits` when that is smaller.
fn resolve_cipher(cipher: Option<&str>, key_bits: Option<u32>) -> Result<CipherSpec> {
    let id = cipher.ok_or_else(|| usage("--cipher is required"))?;
    let spec = registry_lookup(id).map_err(usage)?;
    match key_bits {
        None => Ok(spec),
        Some(b) if b == spec.key_bits() => Ok(spec),
        Some(b) if b > 0 && b < spec.key_bits() => spec.restrict_key(b).map_err(usage),
        Some(b) => Err(usage(format!("--key-bits {b} outside 1..={} for {id}", spec.key_bits()))),
    }
}

fn parse_pairs(spec: &CipherSpec, texts: &[String]) -> Result<Vec<KnownPair>> {
    if texts.is_empty() {
        return Err(usage("at least one --pair PT:CT is required"));
    }
    texts
        .iter()
        .map(|t| KnownPair::parse(t, spec.block_bits()).map_err(|e| usage(format!("--pair {t}: {e}"))))
        .collect()
}

#[derive(Debug, Serialize)]
struct ResolvedServe {
    listen: String,
    cipher: String,
    key_bits: u32,
    pair: Vec<String>,
    strategy: Strategy,
    lease_timeout: f64,
    progress_interval: f64,
    journal: Option<PathBuf>,
    status_interval: f64,
}

fn cmd_serve(a: ServeArgs, out: &mut dyn Write) -> Result<i32> {
    let listen = a.listen.clone().unwrap_or_else(|| format!("0.0.0.0:{DEFAULT_PORT}"));
    let status_interval = secs(a.status_interval, 5.0, "status-interval")?;
    let resume = a
        .journal
        .as_ref()
        .is_some_and(|p| fs::metadata(p).is_ok_and(|m| m.len() > 0));

    let ledger = if resume {
        let path = a.journal.as_ref().expect("checked");
        if a.cipher.is_some() || !a.pairs.is_empty() {
            warn!("resuming {}: job flags are ignored, the journal's job is used", path.display());
        }
        let (ledger, rec) = recover(path)?;
        info!(
            "resumed {} ({} records applied, {} dropped)",
            path.display(),
            rec.records_applied,
            rec.records_dropped
        );
        ledger
    } else {
        let spec = resolve_cipher(a.cipher.as_deref(), a.key_bits)?;
        let pairs = parse_pairs(&spec, &a.pairs)?;
        let strategy = match a.strategy.unwrap_or(StrategyKind::Chunked) {
            StrategyKind::Static => Strategy::Static {
                n: a.devices.ok_or_else(|| usage("--devices is required for --strategy static"))?,
            },
            StrategyKind::Chunked => Strategy::Chunked {
                chunk_keys: a.chunk_keys.unwrap_or(DEFAULT_CHUNK_KEYS),
            },
        };
        let mut job = JobConfig::new(spec.id(), spec.key_bits(), pairs, strategy);
        job.lease_timeout = secs(a.lease_timeout, 30.0, "lease-timeout")?;
        job.progress_interval = secs(a.progress_interval, 2.0, "progress-interval")?;
        let mut ledger = Ledger::start_job(job)?;
        if let Some(path) = &a.journal {
            ledger.start_journal(Journal::create(path).map_err(runtime)?)?;
        }
        ledger
    };

    let job = ledger.config();
    echo(
        "serve",
        &ResolvedServe {
            listen: listen.clone(),
            cipher: job.cipher_id.clone(),
            key_bits: job.key_bits,
            pair: job.pairs.iter().map(|p| p.to_string()).collect(),
            strategy: job.strategy.clone(),
            lease_timeout: job.lease_timeout.as_secs_f64(),
            progress_interval: job.progress_interval.as_secs_f64(),
            journal: a.journal.clone(),
            status_interval: status_interval.as_secs_f64(),
        },
    );

    if let Some(outcome) = ledger.outcome().cloned() {
        info!("journal records a finished job");
        return serve_result(out, &ServeExit::Finished(outcome), &ledger, Duration::ZERO);
    }

    let listener = Listener::bind(listen.as_str()).map_err(|e| runtime(format!("bind {listen}: {e}")))?;
    info!("listening on {}", listener.local_addr().map_or(listen, |a| a.to_string()));
    let shutdown = Arc::new(AtomicBool::new(false));
    register_signals(&shutdown)?;
    let opts = ServeOptions {
        status_interval: (!status_interval.is_zero()).then_some(status_interval),
        shutdown,
        ..ServeOptions::default()
    };
    let report = serve(ledger, listener, opts)?;
    serve_result(out, &report.exit, &report.ledger, report.elapsed)
}

fn serve_result(out: &mut dyn Write, exit: &ServeExit, ledger: &Ledger, elapsed: Duration) -> Result<i32> {
    let status = ledger.status();
    let (outcome, key, code) = match exit {
        ServeExit::Finished(Outcome::Found(k)) => ("found", Some(k.to_hex()), EXIT_FOUND),
        ServeExit::Finished(Outcome::NotFound) => ("not_found", None, EXIT_NOT_FOUND),
        ServeExit::Interrupted | ServeExit::Killed => ("interrupted", None, EXIT_RUNTIME),
    };
    finish(
        out,
        json!({
            "outcome": outcome,
            "key": key,
            "cipher_id": ledger.config().cipher_id,
            "keys_searched": status.searched_keys.to_string(),
            "total_keys": status.total_keys.to_string(),
            "elapsed_s": elapsed.as_secs_f64(),
        }),
    )?;
    Ok(code)
}

fn register_signals(flag: &Arc<AtomicBool>) -> Result<()> {
    for sig in [signal_hook::consts::SIGTERM, signal_hook::consts::SIGINT] {
        signal_hook::flag::register(sig, Arc::clone(flag)).map_err(runtime)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ResolvedAgent {
    connect: String,
    id: String,
    threads: usize,
    rate_limit: Option<f64>,
    rate_hint: Option<f64>,
    progress_every: f64,
    give_up_after: Option<f64>,
}

fn cmd_agent(a: AgentArgs, out: &mut dyn Write) -> Result<i32> {
    let connect = a.connect.unwrap_or_else(|| format!("127.0.0.1:{DEFAULT_PORT}"));
    let mut cfg = AgentConfig::new(a.id.unwrap_or_else(default_agent_id));
    cfg.parallelism = a.threads.unwrap_or_else(threads_default);
    if cfg.parallelism == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    if a.rate_limit.is_some_and(|r| r.is_nan() || r <= 0.0) {
        return Err(usage("--rate-limit must be positive"));
    }
    cfg.rate_limit = a.rate_limit;
    cfg.rate_hint = a.rate_hint.or(a.rate_limit);
    cfg.progress_every = secs(a.progress_every, 1.0, "progress-every")?;
    let give_up = secs(a.give_up_after, 30.0, "give-up-after")?;
    cfg.give_up_after = (!give_up.is_zero()).then_some(give_up);
    echo(
        "agent",
        &ResolvedAgent {
            connect: connect.clone(),
            id: cfg.agent_id.clone(),
            threads: cfg.parallelism,
            rate_limit: cfg.rate_limit,
            rate_hint: cfg.rate_hint,
            progress_every: cfg.progress_every.as_secs_f64(),
            give_up_after: cfg.give_up_after.map(|d| d.as_secs_f64()),
        },
    );
    register_signals(&cfg.interrupt)?;
    let report = run_agent(&Connector::Tcp(connect), cfg).map_err(runtime)?;
    let (exit, code) = match &report.exit {
        AgentExit::Stopped(StopReason::Found) => ("found".to_string(), EXIT_FOUND),
        AgentExit::Stopped(StopReason::Shutdown) => ("not_found".to_string(), EXIT_NOT_FOUND),
        AgentExit::Died => ("died".to_string(), EXIT_RUNTIME),
        AgentExit::Interrupted => ("interrupted".to_string(), EXIT_RUNTIME),
        AgentExit::Refused(why) => (format!("refused: {why}"), EXIT_RUNTIME),
        AgentExit::GaveUp => ("gave_up".to_string(), EXIT_RUNTIME),
    };
    finish(
        out,
        json!({
            "agent_id": report.agent_id,
            "exit": exit,
            "keys_tried": report.keys_tried,
            "assignments": report.assignments,
            "claimed": report.claimed.map(|k| k.to_hex()),
        }),
    )?;
    Ok(code)
}

fn parse_kill(text: &str) -> Result<crate::simulator::ChurnEvent> {
    let bad = || usage(format!("--kill {text}: expected AGENT_INDEX@FRACTION"));
    let (i, f) = text.split_once('@').ok_or_else(bad)?;
    Ok(crate::simulator::ChurnEvent {
        agent_index: i.trim().parse().map_err(|_| bad())?,
        kill_at_fraction: f.trim().parse().map_err(|_| bad())?,
    })
}

fn cmd_simulate(a: SimulateArgs, scenario_file: Option<&Path>, out: &mut dyn Write) -> Result<i32> {
    let mut sc = match scenario_file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            Scenario::from_json(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => {
            let cipher = a.cipher.clone().ok_or_else(|| usage("--cipher or --config is required"))?;
            let bits = match a.key_bits {
                Some(b) => b,
                None => registry_lookup(&cipher).map_err(usage)?.key_bits(),
            };
            Scenario::new(&cipher, bits, a.agents.unwrap_or(4), SimStrategy::Chunked { chunk_keys: None })
        }
    };
    if let Some(c) = a.cipher {
        sc.cipher_id = c;
    }
    if let Some(b) = a.key_bits {
        sc.effective_key_bits = b;
    }
    if let Some(n) = a.agents {
        sc.n_agents = n;
    }
    match a.strategy {
        Some(StrategyKind::Static) => sc.strategy = SimStrategy::Static,
        Some(StrategyKind::Chunked) => sc.strategy = SimStrategy::Chunked { chunk_keys: a.chunk_keys },
        None => {
            if let (Some(k), SimStrategy::Chunked { chunk_keys }) = (a.chunk_keys, &mut sc.strategy) {
                *chunk_keys = Some(k);
            }
        }
    }
    if let Some(p) = a.planted {
        sc.planted_key = match p.as_str() {
            "random" => Planted::Random,
            "absent" => Planted::Absent,
            hex => Planted::Key(hex.to_string()),
        };
    }
    if let Some(s) = a.seed {
        sc.seed = s;
    }
    if let Some(p) = a.pairs {
        sc.pairs = p;
    }
    if a.rate_limit.is_some() {
        sc.rate_limit = a.rate_limit;
    }
    if let Some(t) = a.transport {
        sc.transport = match t {
            TransportArg::Tcp => TransportKind::Tcp,
            TransportArg::Memory => TransportKind::Memory,
        };
    }
    if !a.kills.is_empty() {
        sc.churn_plan = a.kills.iter().map(|k| parse_kill(k)).collect::<Result<_>>()?;
    }
    sc.validate().map_err(usage)?;
    echo("simulate", &sc);

    if !a.sweep.is_empty() {
        let rows = scaling_sweep(&sc, &a.sweep).map_err(runtime)?;
        eprint!("{}", sweep_table(&rows));
        finish(out, json!({ "sweep": rows }))?;
        return Ok(EXIT_FOUND);
    }

    let report = run_scenario(&sc).map_err(runtime)?;
    eprint!("{}", report.table());
    if let Some(path) = &a.report {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    }
    finish(
        out,
        json!({
            "outcome": report.outcome,
            "key": report.key,
            "planted_key": report.planted_key,
            "total_keys_tried": report.total_keys_tried,
            "duplicate_keys_tried": report.duplicate_keys_tried,
            "lost_keys": report.lost_keys,
            "per_agent": report.per_agent(),
            "wall_time_s": report.wall_time_s,
        }),
    )?;
    Ok(if report.found() { EXIT_FOUND } else { EXIT_NOT_FOUND })
}

fn cmd_estimate(a: EstimateArgs, out: &mut dyn Write) -> Result<i32> {
    let mut pos = a.positional.into_iter();
    let key_bits = a.key_bits.or_else(|| pos.next());
    let devices = a.devices.or_else(|| pos.next());
    let rate = a.rate.or_else(|| pos.next());
    let (Some(u), Some(n), Some(r)) = (key_bits, devices, rate) else {
        return Err(usage("estimate needs key bits, devices and rate (positionally or as flags)"));
    };
    let format = a.format.unwrap_or(Format::Table);
    echo(
        "estimate",
        &json!({ "key-bits": u, "devices": n, "rate": r, "format": format }),
    );
    let e: Estimate = estimate_from_text(&u, &n, &r).map_err(usage)?;
    let w = |r: std::io::Result<()>| r.map_err(runtime);
    match format {
        Format::Csv => {
            w(writeln!(out, "{}", Estimate::CSV_HEADER))?;
            w(writeln!(out, "{}", e.csv_line()))?;
        }
        Format::Table => {
            w(write!(out, "{}", e.table()))?;
            finish(out, serde_json::to_value(e.row()).expect("row serializes"))?;
        }
    }
    Ok(EXIT_FOUND)
}

fn cmd_crack(a: CrackArgs, out: &mut dyn Write) -> Result<i32> {
    let spec = resolve_cipher(a.cipher.as_deref(), a.key_bits)?;
    let pairs = parse_pairs(&spec, &a.pairs)?;
    let threads = a.threads.unwrap_or_else(threads_default).max(1);
    echo(
        "crack",
        &json!({
            "cipher": spec.id(),
            "key-bits": spec.key_bits(),
            "pair": a.pairs,
            "threads": threads,
        }),
    );
    let began = Instant::now();
    let r = crack(&spec, &pairs, threads).map_err(runtime)?;
    finish(
        out,
        json!({
            "outcome": if r.key.is_some() { "found" } else { "not_found" },
            "key": r.key.as_ref().map(KeyValue::to_hex),
            "cipher_id": spec.id(),
            "keys_tried": r.keys_tried,
            "elapsed_s": began.elapsed().as_secs_f64(),
        }),
    )?;
    Ok(if r.key.is_some() { EXIT_FOUND } else { EXIT_NOT_FOUND })
}

fn cmd_make_pair(a: MakePairArgs, out: &mut dyn Write) -> Result<i32> {
    use rand::SeedableRng;
    let spec = resolve_cipher(a.cipher.as_deref(), a.key_bits)?;
    let key_text = a.key.as_deref().ok_or_else(|| usage("--key is required"))?;
    let key = KeyValue::from_hex(key_text, spec.key_bits()).map_err(|e| usage(format!("--key: {e}")))?;
    let plaintexts: Vec<Block> = if a.plaintexts.is_empty() {
        let mut rng = match a.seed {
            Some(s) => rand_chacha::ChaCha8Rng::seed_from_u64(s),
            None => rand_chacha::ChaCha8Rng::from_entropy(),
        };
        let bits = spec.block_bits();
        (0..2)
            .map(|_| {
                let v = num_bigint::RandBigInt::gen_biguint(&mut rng, bits.into());
                Block::new(KeyValue::new(v, bits).expect("drawn within width"))
            })
            .collect()
    } else {
        a.plaintexts
            .iter()
            .map(|t| Block::from_hex(t, spec.block_bits()).map_err(|e| usage(format!("--plaintext {t}: {e}"))))
            .collect::<Result<_>>()?
    };
    echo(
        "make-pair",
        &json!({
            "cipher": spec.id(),
            "key-bits": spec.key_bits(),
            "key": key.to_hex(),
            "plaintext": plaintexts.iter().map(Block::to_hex).collect::<Vec<_>>(),
        }),
    );
    let pairs: Vec<String> = plaintexts
        .iter()
        .map(|pt| spec.make_pair(pt, &key).map(|p| p.to_string()))
        .collect::<std::result::Result<_, _>>()
        .map_err(usage)?;
    eprintln!(
        "{}",
        pairs.iter().map(|p| format!("--pair {p}")).collect::<Vec<_>>().join(" ")
    );
    finish(
        out,
        json!({ "cipher_id": spec.id(), "key": key.to_hex(), "pairs": pairs }),
    )?;
    Ok(EXIT_FOUND)
}
