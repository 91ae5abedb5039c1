//! Reproduces the exhaustion-time arithmetic for a few key widths and fleet sizes.
//!
//! ```text
//! cargo run --example estimate
//! ```

use keysweep::estimator::{estimate_from_text, Estimate};

fn main() {
    println!("{}", Estimate::CSV_HEADER);
    for (u, n, r) in [("56", "1e6", "1000"), ("56", "1e8", "1000"), ("512", "1e8", "1000"), ("1", "1", "1")] {
        let e = estimate_from_text(u, n, r).expect("valid inputs");
        println!("{}", e.csv_line());
    }
    println!();
    print!("{}", estimate_from_text("56", "1e6", "1000").unwrap().table());
}
