//! Splits a 4-bit key space among four devices and walks one device's range
//! the way an agent does: start at the first key and add one until the last.
//!
//! ```text
//! cargo run --example partition
//! ```

use keysweep::keyspace::partition;

fn main() {
    let p = partition(4, 4).expect("4 devices fit a 16-key space");
    for (i, r) in p.ranges().iter().enumerate() {
        println!(
            "device {i}: {}-{} ({} keys)",
            r.first().to_binary(),
            r.last().to_binary(),
            r.size()
        );
    }
    let second = &p.ranges()[1];
    let walk: Vec<String> = second.keys().map(|k| k.to_binary()).collect();
    println!("device 1 tries {}", walk.join(", "));

    // uneven splits put the extra keys on the lowest ranges
    let uneven = partition(10, 3).unwrap();
    for r in uneven.ranges() {
        println!("{r} size {}", r.size());
    }
}
