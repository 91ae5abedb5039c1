use std::collections::HashMap;
use std::time::{Duration, Instant};

use num_bigint::BigUint;
use proptest::prelude::*;

use keysweep::cipher::{registry_lookup, Block, KnownPair};
use keysweep::coordinator::{JobConfig, Ledger, Outbound, Outcome, Recipient, Strategy as Assigning};
use keysweep::keyspace::{partition, space_size, KeyRange, KeyValue};
use keysweep::protocol::{decode, encode, Message, StopReason};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn partition_is_exhaustive_and_disjoint(u in 1u32..=16, n in 1u64..=64) {
        prop_assume!(BigUint::from(n) <= space_size(u));
        let p = partition(u, n).unwrap();
        prop_assert_eq!(p.len() as u64, n);
        let total = 1u64 << u;
        let mut next = 0u64;
        for r in p.ranges() {
            let first = r.first().to_u64().unwrap();
            let last = r.last().to_u64().unwrap();
            prop_assert_eq!(first, next);
            let size = last - first + 1;
            // ceil or floor of 2^u / n
            prop_assert!(size == total / n || size == total.div_ceil(n));
            next = last + 1;
        }
        prop_assert_eq!(next, total);
    }

    #[test]
    fn hex_round_trip(bits in 1u32..=200, seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v = num_bigint::RandBigInt::gen_biguint(&mut rng, bits.into());
        let k = KeyValue::new(v, bits).unwrap();
        let hex = k.to_hex();
        prop_assert_eq!(hex.len(), (bits as usize).div_ceil(4));
        prop_assert_eq!(KeyValue::from_hex(&hex, bits).unwrap(), k);
    }

    #[test]
    fn split_preserves_range(first in 0u64..1 << 20, len in 1u64..1 << 12, n in 1u64..=50) {
        prop_assume!(n <= len);
        let r = KeyRange::new(
            KeyValue::from_u64(first, 32).unwrap(),
            KeyValue::from_u64(first + len - 1, 32).unwrap(),
        ).unwrap();
        let parts = r.split(n).unwrap();
        prop_assert_eq!(parts.len() as u64, n);
        let sizes: Vec<u64> = parts.iter().map(|p| p.size().try_into().unwrap()).collect();
        prop_assert_eq!(sizes.iter().sum::<u64>(), len);
        prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1] && w[0] - w[1] <= 1));
        prop_assert_eq!(parts[0].first(), r.first());
        prop_assert_eq!(parts.last().unwrap().last(), r.last());
    }

    #[test]
    fn wire_round_trip(job in "[a-z0-9]{1,8}", k in any::<u16>(), tried in any::<u64>(), agent in "[A-Za-z0-9_.-]{1,20}") {
        let key = KeyValue::from_u64(k.into(), 16).unwrap();
        let pair = KnownPair::new(Block::from_u64(k.into(), 16).unwrap(), Block::from_u64(!k as u64 & 0xffff, 16).unwrap()).unwrap();
        let msgs = [
            Message::hello(agent.clone(), Some(tried as f64)),
            Message::assign(job.clone(), "xor16", &KeyRange::single(key.clone()), &[pair]),
            Message::progress(job.clone(), &key, tried),
            Message::found(job.clone(), &key),
            Message::exhausted(job.clone()),
            Message::stop(StopReason::Shutdown),
            Message::error("not_owner", agent),
        ];
        for m in msgs {
            let line = encode(&m);
            prop_assert_eq!(line.last(), Some(&b'\n'));
            prop_assert_eq!(line.iter().filter(|&&b| b == b'\n').count(), 1);
            prop_assert_eq!(decode(&line).unwrap(), m);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn speck_round_trip(key in any::<u64>(), pt in any::<u32>()) {
        let spec = registry_lookup("speck32_64").unwrap();
        let k = KeyValue::from_u64(key, 64).unwrap();
        let p = Block::from_u64(pt.into(), 32).unwrap();
        let c = spec.encrypt(&p, &k).unwrap();
        prop_assert_eq!(spec.decrypt(&c, &k).unwrap(), p);
    }

    #[test]
    fn xor_round_trip(key in any::<u16>(), pt in any::<u16>()) {
        let spec = registry_lookup("xor16").unwrap();
        let k = KeyValue::from_u64(key.into(), 16).unwrap();
        let p = Block::from_u64(pt.into(), 16).unwrap();
        let c = spec.encrypt(&p, &k).unwrap();
        prop_assert_eq!(c.value().to_u64(), Some((pt ^ key) as u64));
        prop_assert_eq!(spec.decrypt(&c, &k).unwrap(), p);
    }
}

#[derive(Debug, Clone)]
enum Op {
    Hello(usize),
    /// Checkpoint `num/8` of the way through the agent's range.
    Progress(usize, u8),
    Exhausted(usize),
    Disconnect(usize),
    Tick(u16),
}

fn op() -> impl proptest::strategy::Strategy<Value = Op> {
    prop_oneof![
        3 => (0..4usize).prop_map(Op::Hello),
        4 => (0..4usize, 0..8u8).prop_map(|(a, f)| Op::Progress(a, f)),
        3 => (0..4usize).prop_map(Op::Exhausted),
        1 => (0..4usize).prop_map(Op::Disconnect),
        2 => (0..1500u16).prop_map(Op::Tick),
    ]
}

/// What each agent believes it holds, learned from the ledger's messages.
#[derive(Default)]
struct Agents {
    held: HashMap<String, (String, KeyRange)>,
    progress: HashMap<String, u64>,
}

impl Agents {
    fn deliver(&mut self, out: Vec<Outbound>) {
        for o in out {
            match (o.to, o.message) {
                (Recipient::Agent(a), m @ Message::Assign { .. }) => {
                    let range = m.assigned_range().unwrap().unwrap();
                    let Message::Assign { job_id, .. } = m else { unreachable!() };
                    self.held.insert(a, (job_id, range));
                }
                (Recipient::Agent(a), Message::Stop { .. }) => {
                    self.held.remove(&a);
                }
                (Recipient::All, Message::Stop { .. }) => self.held.clear(),
                _ => {}
            }
        }
    }
}

fn name(i: usize) -> String {
    format!("a{i}")
}

fn ledger_for(strategy: Assigning) -> Ledger {
    // 0100 -> 0000 needs key 0x100, outside an 8-bit space: nothing to find
    let pair = KnownPair::parse("0100:0000", 16).unwrap();
    let mut job = JobConfig::new("xor16", 8, vec![pair], strategy);
    job.lease_timeout = Duration::from_millis(1000);
    Ledger::start_job(job).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ledger_invariants_hold_under_any_schedule(
        ops in proptest::collection::vec(op(), 1..80),
        chunked in any::<bool>(),
        size in 1u64..40,
    ) {
        let strategy = if chunked { Assigning::Chunked { chunk_keys: size } } else { Assigning::Static { n: size } };
        let mut ledger = ledger_for(strategy);
        let mut agents = Agents::default();
        let mut now = Instant::now();
        for op in ops {
            match op {
                Op::Hello(i) => {
                    agents.held.remove(&name(i));
                    if let Ok(out) = ledger.handle_hello(&name(i), now) {
                        agents.deliver(out);
                    }
                }
                Op::Progress(i, f) => {
                    if let Some((job, range)) = agents.held.get(&name(i)).cloned() {
                        let size: u64 = range.size().try_into().unwrap();
                        let done = (size * f as u64 / 8).max(1);
                        let prev = agents.progress.get(&job).copied().unwrap_or(0);
                        if done > prev {
                            let key = KeyValue::from_u64(range.first().to_u64().unwrap() + done - 1, 8).unwrap();
                            ledger.handle_progress(&name(i), &job, &key.to_hex(), done, now).unwrap();
                            agents.progress.insert(job, done);
                        }
                    }
                }
                Op::Exhausted(i) => {
                    if let Some((job, _)) = agents.held.remove(&name(i)) {
                        agents.deliver(ledger.handle_exhausted(&name(i), &job, now).unwrap());
                    }
                }
                Op::Disconnect(i) => {
                    agents.held.remove(&name(i));
                    agents.deliver(ledger.agent_disconnected(&name(i), now).unwrap());
                }
                Op::Tick(ms) => {
                    now += Duration::from_millis(ms.into());
                    let (_, out) = ledger.reap_leases(now).unwrap();
                    agents.deliver(out);
                }
            }
            // a reaped agent still thinks it holds its job; drop those
            agents.held.retain(|a, (job, _)| {
                ledger.assignment(job).and_then(|x| x.agent_id.as_deref()) == Some(a.as_str())
            });
            prop_assert_eq!(ledger.check_invariants(), Ok(()));
        }

        // one honest agent finishes whatever is left
        let closer = "closer";
        now += Duration::from_secs(5);
        let (_, out) = ledger.reap_leases(now).unwrap();
        agents.deliver(out);
        for i in 0..4 {
            agents.deliver(ledger.agent_disconnected(&name(i), now).unwrap());
        }
        agents.deliver(ledger.handle_hello(closer, now).unwrap());
        let mut steps = 0;
        while ledger.outcome().is_none() {
            match agents.held.remove(closer) {
                Some((job, _)) => agents.deliver(ledger.handle_exhausted(closer, &job, now).unwrap()),
                None => {
                    // parked: reserved static ranges open after a lease period
                    now += Duration::from_secs(2);
                    agents.deliver(ledger.reap_leases(now).unwrap().1);
                }
            }
            prop_assert_eq!(ledger.check_invariants(), Ok(()));
            steps += 1;
            prop_assert!(steps <= 600);
        }
        prop_assert_eq!(ledger.outcome(), Some(&Outcome::NotFound));
        prop_assert_eq!(ledger.status().searched_keys, space_size(8));
    }
}
