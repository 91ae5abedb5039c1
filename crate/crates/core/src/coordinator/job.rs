use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::CoordinatorError;
use crate::cipher::{registry_lookup, CipherSpec, KnownPair};
use crate::keyspace::space_size;
use crate::protocol::PairHex;

pub const DEFAULT_LEASE_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_PROGRESS_INTERVAL: Duration = Duration::from_secs(2);

/// How the key space is handed out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// One fixed range per device, `n` devices.
    Static { n: u64 },
    /// Fixed-size chunks leased on demand.
    Chunked { chunk_keys: u64 },
}

#[derive(Debug, Clone)]
pub struct JobConfig {
    pub cipher_id: String,
    pub key_bits: u32,
    pub pairs: Vec<KnownPair>,
    pub strategy: Strategy,
    pub lease_timeout: Duration,
    pub progress_interval: Duration,
}

impl JobConfig {
    pub fn new(
        cipher_id: impl Into<String>,
        key_bits: u32,
        pairs: Vec<KnownPair>,
        strategy: Strategy,
    ) -> Self {
        Self {
            cipher_id: cipher_id.into(),
            key_bits,
            pairs,
            strategy,
            lease_timeout: DEFAULT_LEASE_TIMEOUT,
            progress_interval: DEFAULT_PROGRESS_INTERVAL,
        }
    }

    /// Checks the config and resolves the cipher. A cipher wider than
    /// `key_bits` is restricted to `key_bits`, and `cipher_id` is rewritten to
    /// the restricted id.
    pub fn resolve(&mut self) -> Result<CipherSpec, CoordinatorError> {
        let invalid = |m: String| Err(CoordinatorError::InvalidConfig(m));
        let mut spec = registry_lookup(&self.cipher_id)
            .map_err(|e| CoordinatorError::InvalidConfig(e.to_string()))?;
        if self.key_bits == 0 || self.key_bits > spec.key_bits() {
            return invalid(format!(
                "key_bits {} outside 1..={} for {}",
                self.key_bits,
                spec.key_bits(),
                spec.id()
            ));
        }
        if self.key_bits < spec.key_bits() {
            spec = spec
                .restrict_key(self.key_bits)
                .map_err(|e| CoordinatorError::InvalidConfig(e.to_string()))?;
            self.cipher_id = spec.id().to_string();
        }
        if self.pairs.is_empty() {
            return invalid("at least one known pair is required".into());
        }
        spec.check_pairs(&self.pairs)
            .map_err(|e| CoordinatorError::InvalidConfig(e.to_string()))?;
        match self.strategy {
            Strategy::Static { n } => {
                if n == 0 || num_bigint::BigUint::from(n) > space_size(self.key_bits) {
                    return invalid(format!(
                        "static device count {n} must be in 1..=2^{}",
                        self.key_bits
                    ));
                }
            }
            Strategy::Chunked { chunk_keys } => {
                if chunk_keys == 0 {
                    return invalid("chunk_keys must be at least 1".into());
                }
            }
        }
        if self.lease_timeout.is_zero() || self.progress_interval.is_zero() {
            return invalid("lease_timeout and progress_interval must be positive".into());
        }
        Ok(spec)
    }

    pub fn to_record(&self) -> JobConfigRecord {
        JobConfigRecord {
            cipher_id: self.cipher_id.clone(),
            key_bits: self.key_bits,
            pairs: self.pairs.iter().map(PairHex::from).collect(),
            strategy: self.strategy.clone(),
            lease_timeout_ms: self.lease_timeout.as_millis() as u64,
            progress_interval_ms: self.progress_interval.as_millis() as u64,
        }
    }
}

/// Serialized form of [`JobConfig`], used in the journal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobConfigRecord {
    pub cipher_id: String,
    pub key_bits: u32,
    pub pairs: Vec<PairHex>,
    pub strategy: Strategy,
    pub lease_timeout_ms: u64,
    pub progress_interval_ms: u64,
}

impl JobConfigRecord {
    pub fn to_config(&self) -> Result<JobConfig, CoordinatorError> {
        let spec = registry_lookup(&self.cipher_id)
            .map_err(|e| CoordinatorError::InvalidConfig(e.to_string()))?;
        let pairs = self
            .pairs
            .iter()
            .map(|p| p.to_pair(spec.block_bits()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CoordinatorError::InvalidConfig(e.to_string()))?;
        Ok(JobConfig {
            cipher_id: self.cipher_id.clone(),
            key_bits: self.key_bits,
            pairs,
            strategy: self.strategy.clone(),
            lease_timeout: Duration::from_millis(self.lease_timeout_ms),
            progress_interval: Duration::from_millis(self.progress_interval_ms),
        })
    }
}
