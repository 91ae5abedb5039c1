//! The single-machine brute force used as the reference for distributed runs.
//!
//! ```text
//! cargo run --release --example crack
//! ```

use std::time::Instant;

use keysweep::cipher::{registry_lookup, Block};
use keysweep::crack::crack;
use keysweep::keyspace::KeyValue;

fn main() {
    let xor = registry_lookup("xor16").unwrap();
    let pair = keysweep::cipher::KnownPair::parse("1234:5678", 16).unwrap();
    let r = crack(&xor, &[pair], 1).unwrap();
    println!("xor16 1234:5678 -> {:?} after {} keys", r.key, r.keys_tried);

    let spec = registry_lookup("speck32_64-r20").unwrap();
    let secret = KeyValue::from_hex("7a3c5", 20).unwrap();
    let pairs: Vec<_> = [0x01234567u64, 0x89abcdef]
        .iter()
        .map(|&p| spec.make_pair(&Block::from_u64(p, 32).unwrap(), &secret).unwrap())
        .collect();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let t = Instant::now();
    let r = crack(&spec, &pairs, threads).unwrap();
    println!(
        "{} -> {:?} after {} keys on {threads} thread(s) in {:.2?}",
        spec.id(),
        r.key,
        r.keys_tried,
        t.elapsed()
    );
}
