//! An arbiter and eight agents over loopback TCP searching a 20-bit Speck key
//! with two known pairs, wired up by hand rather than through the simulator.
//!
//! ```text
//! cargo run --release --example loopback_cluster
//! ```

use std::thread;
use std::time::Duration;

use keysweep::agent::{run_agent, AgentConfig};
use keysweep::cipher::{registry_lookup, Block};
use keysweep::coordinator::{spawn, JobConfig, Ledger, ServeOptions, Strategy};
use keysweep::keyspace::KeyValue;
use keysweep::transport::Listener;

fn main() {
    env_logger::init();
    let spec = registry_lookup("speck32_64-r20").unwrap();
    let secret = KeyValue::from_hex("c0ffe", 20).unwrap();
    let pairs = vec![
        spec.make_pair(&Block::from_u64(0x6574694c, 32).unwrap(), &secret).unwrap(),
        spec.make_pair(&Block::from_u64(0x0badf00d, 32).unwrap(), &secret).unwrap(),
    ];
    let job = JobConfig::new("speck32_64", 20, pairs, Strategy::Static { n: 8 });
    let ledger = Ledger::start_job(job).expect("valid job");

    let listener = Listener::bind("127.0.0.1:0").unwrap();
    let connector = listener.connector().unwrap();
    println!("arbiter on {:?}", listener.local_addr().unwrap());
    let opts = ServeOptions {
        status_interval: Some(Duration::from_secs(1)),
        ..ServeOptions::default()
    };
    let arbiter = spawn(ledger, listener, opts);

    let agents: Vec<_> = (0..8)
        .map(|i| {
            let c = connector.clone();
            thread::spawn(move || run_agent(&c, AgentConfig::new(format!("dev{i}"))))
        })
        .collect();
    let report = arbiter.join().expect("arbiter runs");
    for a in agents {
        let r = a.join().unwrap().unwrap();
        println!("{}: {} keys, {:?}", r.agent_id, r.keys_tried, r.exit);
    }
    println!("{:?} in {:.2?}", report.exit, report.elapsed);
}
