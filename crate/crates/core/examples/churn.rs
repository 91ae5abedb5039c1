//! Eight agents on a chunked job; two of them die silently a quarter of the way
//! into their share. The arbiter's lease reaper hands their unfinished chunks to
//! the survivors and the planted key is still found.
//!
//! ```text
//! cargo run --release --example churn
//! ```

use keysweep::simulator::{run_scenario, ChurnEvent, Scenario, SimStrategy};

fn main() {
    env_logger::init();
    let mut s = Scenario::new("speck32_64", 18, 8, SimStrategy::Chunked { chunk_keys: Some(3000) });
    s.seed = 2024;
    s.rate_limit = Some(20_000.0);
    s.lease_timeout_ms = 1_000;
    s.progress_interval_ms = 400;
    s.churn_plan = vec![
        ChurnEvent { agent_index: 2, kill_at_fraction: 0.25 },
        ChurnEvent { agent_index: 5, kill_at_fraction: 0.25 },
    ];
    let report = run_scenario(&s).expect("scenario runs");
    print!("{}", report.table());
    let bound = 2.0 * report.lease_timeout_s * report.rate_keys_per_s;
    println!(
        "duplicate work {} keys (bound {bound:.0}), lost {}",
        report.duplicate_keys_tried, report.lost_keys
    );
    for e in report.timeline.iter().filter(|e| {
        matches!(
            e.event,
            keysweep::timeline::TimelineEvent::AgentKilled { .. } | keysweep::timeline::TimelineEvent::Released { .. }
        )
    }) {
        println!("{:>8.1} ms  {}", e.at_ms, serde_json::to_string(&e.event).unwrap());
    }
}
