//! Encrypts under Speck32/64, checks the published test vector, and builds a
//! known plaintext-ciphertext pair for a key restricted to 20 bits.
//!
//! ```text
//! cargo run --example speck_pair
//! ```

use keysweep::cipher::{registry_lookup, Block};
use keysweep::keyspace::KeyValue;

fn main() {
    let speck = registry_lookup("speck32_64").unwrap();
    let key = KeyValue::from_hex("1918111009080100", 64).unwrap();
    let pt = Block::from_hex("6574694c", 32).unwrap();
    let ct = speck.encrypt(&pt, &key).unwrap();
    println!("speck32_64 {pt} under {key} -> {ct} (published: a86842f2)");
    assert_eq!(ct.to_hex(), "a86842f2");

    let r20 = registry_lookup("speck32_64-r20").unwrap();
    let secret = KeyValue::from_hex("b5e1c", 20).unwrap();
    let pairs: Vec<_> = ["00000000", "deadbeef"]
        .iter()
        .map(|p| r20.make_pair(&Block::from_hex(p, 32).unwrap(), &secret).unwrap())
        .collect();
    for p in &pairs {
        println!("{} pair {p}", r20.id());
    }
    println!("stands for full key {}", r20.expand_key(&secret).unwrap());
    println!("verifies: {}", r20.verify(&secret, &pairs).unwrap());
}
