//! Exhausts a 16-bit space with 1, 2, 4 and 8 rate-capped agents: total work
//! stays at 2^16 while work per agent, and wall time, divide by n.
//!
//! ```text
//! cargo run --release --example scaling_sweep
//! ```

use keysweep::simulator::{scaling_sweep, sweep_table, Planted, Scenario, SimStrategy};

fn main() {
    let mut base = Scenario::new("speck32_64", 16, 1, SimStrategy::Static);
    base.planted_key = Planted::Absent;
    base.rate_limit = Some(40_000.0);
    let rows = scaling_sweep(&base, &[1, 2, 4, 8]).expect("sweep runs");
    print!("{}", sweep_table(&rows));
}
