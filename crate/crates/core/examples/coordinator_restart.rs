//! Kills the arbiter a third of the way through a job and restarts it from its
//! journal. Agents reconnect on their own; assignments that were active at the
//! crash are split at their last checkpoint and the rest is handed out again.
//!
//! ```text
//! cargo run --release --example coordinator_restart
//! ```

use keysweep::simulator::{run_scenario, Planted, Scenario, SimStrategy};

fn main() {
    env_logger::init();
    let mut s = Scenario::new("speck32_64", 16, 4, SimStrategy::Chunked { chunk_keys: Some(4096) });
    s.planted_key = Planted::Absent;
    s.rate_limit = Some(10_000.0);
    s.progress_interval_ms = 400;
    s.coordinator_crash_at = Some(0.33);
    let report = run_scenario(&s).expect("scenario runs");
    print!("{}", report.table());
    let bound = s.n_agents as f64 * report.progress_interval_s * report.rate_keys_per_s;
    println!(
        "re-searched {} keys (bound {bound:.0}); every key tried: {}",
        report.duplicate_keys_tried,
        report.lost_keys == 0 && report.total_keys_tried - report.duplicate_keys_tried == 1 << 16
    );
}
