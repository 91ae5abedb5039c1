//! Single-process exhaustive search: the reference every distributed run is
//! checked against.

use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;

use log::warn;

use crate::agent::{search, AgentError, SearchLimits, SearchOutcome, SearchTask};
use crate::cipher::{CipherSpec, KnownPair};
use crate::keyspace::{KeyRange, KeyValue};

/// Above this many key bits a full crack is unlikely to finish.
pub const CRACK_WARN_BITS: u32 = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrackResult {
    /// Smallest key satisfying every pair.
    pub key: Option<KeyValue>,
    pub keys_tried: u64,
}

/// Searches the whole key space of `spec` in ascending order on `threads`
/// threads and returns the smallest matching key.
pub fn crack(spec: &CipherSpec, pairs: &[KnownPair], threads: usize) -> Result<CrackResult, AgentError> {
    if spec.key_bits() > CRACK_WARN_BITS {
        warn!(
            "cracking {} bits of key on one machine; this may not finish",
            spec.key_bits()
        );
    }
    let full = KeyRange::full(spec.key_bits())?;
    let lanes = full.split(
        full.size()
            .min(threads.max(1).into())
            .try_into()
            .unwrap_or(1),
    )?;
    let stops: Vec<AtomicBool> = lanes.iter().map(|_| AtomicBool::new(false)).collect();
    let outcomes = thread::scope(|s| {
        let handles: Vec<_> = lanes
            .iter()
            .enumerate()
            .map(|(i, range)| {
                let task = SearchTask::new("crack", spec.clone(), range.clone(), pairs.to_vec());
                let stops = &stops;
                s.spawn(move || {
                    let out = search(&task, &stops[i], &SearchLimits::default(), |_, _| {});
                    if let Ok(SearchOutcome::Found { .. }) = out {
                        // later lanes can only hold larger keys
                        for stop in &stops[i + 1..] {
                            stop.store(true, Ordering::SeqCst);
                        }
                    }
                    out
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("crack lane panicked"))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let keys_tried = outcomes.iter().map(SearchOutcome::keys_tried).sum();
    let key = outcomes.into_iter().find_map(|o| match o {
        SearchOutcome::Found { key, .. } => Some(key),
        _ => None,
    });
    Ok(CrackResult { key, keys_tried })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cipher::{registry_lookup, Block};
    use rand::{Rng, SeedableRng};

    #[test]
    fn xor_analytic_key() {
        let spec = registry_lookup("xor16").unwrap();
        let pair = KnownPair::parse("1234:5678", 16).unwrap();
        for threads in [1, 3, 8] {
            let r = crack(&spec, std::slice::from_ref(&pair), threads).unwrap();
            assert_eq!(r.key, Some(KeyValue::from_u64(0x444c, 16).unwrap()));
        }
    }

    #[test]
    fn zero_key_found_first() {
        let spec = registry_lookup("speck32_64-r16").unwrap();
        let zero = KeyValue::zero(16).unwrap();
        let pair = spec.make_pair(&Block::from_u64(0x6574694c, 32).unwrap(), &zero).unwrap();
        let r = crack(&spec, &[pair], 1).unwrap();
        assert_eq!(r, CrackResult { key: Some(zero), keys_tried: 1 });
    }

    /// Toy cipher whose keys collide modulo 7.
    #[derive(Debug)]
    struct Mod7;

    impl crate::cipher::BlockCipher for Mod7 {
        fn block_bits(&self) -> u32 {
            8
        }
        fn key_bits(&self) -> u32 {
            12
        }
        fn encrypt_raw(&self, block: &num_bigint::BigUint, key: &num_bigint::BigUint) -> num_bigint::BigUint {
            (block + key % 7u32) % 256u32
        }
        fn decrypt_raw(&self, block: &num_bigint::BigUint, key: &num_bigint::BigUint) -> num_bigint::BigUint {
            (block + 256u32 - key % 7u32) % 256u32
        }
    }

    #[test]
    fn smallest_of_several_matches_wins() {
        let spec = CipherSpec::new("mod7", std::sync::Arc::new(Mod7));
        let pair = KnownPair::parse("00:05", 8).unwrap();
        for threads in [1, 4, 16] {
            let r = crack(&spec, std::slice::from_ref(&pair), threads).unwrap();
            assert_eq!(r.key.unwrap().to_u64(), Some(5));
        }
    }

    #[test]
    fn speck_r16_matches_plain_loop() {
        let spec = registry_lookup("speck32_64-r16").unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let planted = KeyValue::from_u64(rng.gen_range(0..1 << 16), 16).unwrap();
        let pairs: Vec<_> = (0..2)
            .map(|_| spec.make_pair(&Block::from_u64(rng.gen::<u32>() as u64, 32).unwrap(), &planted).unwrap())
            .collect();
        // independent loop straight over the primitive
        let words: Vec<(u32, u32)> = pairs
            .iter()
            .map(|p| {
                (
                    p.plaintext.value().to_u64().unwrap() as u32,
                    p.ciphertext.value().to_u64().unwrap() as u32,
                )
            })
            .collect();
        let reference = (0u64..1 << 16).find(|&k| {
            let rk = crate::cipher::Speck32_64::key_schedule(k);
            words
                .iter()
                .all(|&(pt, ct)| crate::cipher::Speck32_64::encrypt_block(pt, &rk) == ct)
        });
        let r = crack(&spec, &pairs, 2).unwrap();
        assert_eq!(r.key.and_then(|k| k.to_u64()), reference);
        assert_eq!(reference, planted.to_u64());
    }
}
