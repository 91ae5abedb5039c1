//! The wire format: one JSON object per line, tagged by `type`.
//!
//! ```text
//! cargo run --example protocol
//! ```

use keysweep::cipher::KnownPair;
use keysweep::keyspace::{KeyRange, KeyValue};
use keysweep::protocol::{decode, encode, Message, StopReason};

fn main() {
    let range = KeyRange::from_hex("4", "7", 4).unwrap();
    let pair = KnownPair::parse("0000:0006", 16).unwrap();
    let conversation = [
        Message::hello("dev1", Some(1000.0)),
        Message::assign("j1", "xor16-r4", &range, &[pair]),
        Message::progress("j1", range.first(), 0),
        Message::progress("j1", &KeyValue::from_binary("0101").unwrap(), 2),
        Message::found("j1", &KeyValue::from_binary("0110").unwrap()),
        Message::stop(StopReason::Found),
    ];
    for m in &conversation {
        let line = encode(m);
        print!("{}", String::from_utf8_lossy(&line));
        assert_eq!(&decode(&line).unwrap(), m);
    }
    for bad in [&b"{\"type\":\"progress\",\"job_id\":\"j1\"}"[..], b"not json", b"{\"type\":\"found\",\"job_id\":\"j1\",\"key\":\"0X6\"}"] {
        println!("{:<60} -> {}", String::from_utf8_lossy(bad), decode(bad).unwrap_err());
    }
}
