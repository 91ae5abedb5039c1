//! Block ciphers behind a width-checked [`CipherSpec`].
//!
//! Shipped ciphers:
//!
//! * `xor16` - 16-bit block, 16-bit key, `ct = pt ^ key`. Its key is analytically
//!   recoverable from one pair, which makes it the reference oracle for tests.
//! * `speck32_64` - Speck with 32-bit blocks and 64-bit keys: 22 ARX rounds,
//!   rotation amounts 7 and 2. Hex forms are big-endian word concatenations,
//!   so key `1918111009080100` is the word sequence `(1918, 1110, 0908, 0100)`
//!   with `0100` the first round key.
//!
//! Any cipher id may carry a `-r<bits>` suffix (see [`CipherSpec::restrict_key`]).

use std::fmt;
use std::sync::Arc;

use num_bigint::BigUint;
use num_traits::ToPrimitive;
use thiserror::Error;

use crate::keyspace::{KeyValue, KeyspaceError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CipherError {
    #[error("unknown cipher {0:?}")]
    NotFound(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Keyspace(#[from] KeyspaceError),
}

pub type Result<T> = std::result::Result<T, CipherError>;

/// A fixed-width data block (plaintext or ciphertext).
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Block(KeyValue);

impl Block {
    pub fn new(value: KeyValue) -> Self {
        Self(value)
    }

    pub fn from_u64(value: u64, bits: u32) -> Result<Self> {
        Ok(Self(KeyValue::from_u64(value, bits)?))
    }

    pub fn from_hex(text: &str, bits: u32) -> Result<Self> {
        Ok(Self(KeyValue::from_hex(text, bits)?))
    }

    pub fn bits(&self) -> u32 {
        self.0.bit_width()
    }

    pub fn value(&self) -> &KeyValue {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        self.0.to_hex()
    }

    fn raw(&self) -> &BigUint {
        self.0.magnitude()
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Debug for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Block({})", self.0.to_hex())
    }
}

/// A plaintext block and its ciphertext under the unknown key.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct KnownPair {
    pub plaintext: Block,
    pub ciphertext: Block,
}

impl KnownPair {
    pub fn new(plaintext: Block, ciphertext: Block) -> Result<Self> {
        if plaintext.bits() != ciphertext.bits() {
            return Err(CipherError::InvalidArgument(format!(
                "pair blocks have widths {} and {}",
                plaintext.bits(),
                ciphertext.bits()
            )));
        }
        Ok(Self {
            plaintext,
            ciphertext,
        })
    }

    /// Parses `pt:ct` hex.
    pub fn parse(text: &str, block_bits: u32) -> Result<Self> {
        let (pt, ct) = text.split_once(':').ok_or_else(|| {
            CipherError::InvalidArgument(format!("pair {text:?} is not of the form pt:ct"))
        })?;
        Self::new(Block::from_hex(pt, block_bits)?, Block::from_hex(ct, block_bits)?)
    }
}

impl fmt::Display for KnownPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.plaintext, self.ciphertext)
    }
}

/// Raw block cipher primitive. Callers guarantee operand widths; [`CipherSpec`]
/// does the checking.
pub trait BlockCipher: Send + Sync + fmt::Debug {
    fn block_bits(&self) -> u32;
    fn key_bits(&self) -> u32;
    fn encrypt_raw(&self, block: &BigUint, key: &BigUint) -> BigUint;
    fn decrypt_raw(&self, block: &BigUint, key: &BigUint) -> BigUint;

    /// True iff `key` decrypts every pair's ciphertext to its plaintext.
    /// Short-circuits on the first mismatch.
    fn matches_raw(&self, key: &BigUint, pairs: &[KnownPair]) -> bool {
        pairs
            .iter()
            .all(|p| self.decrypt_raw(p.ciphertext.raw(), key) == *p.plaintext.raw())
    }

    /// [`BlockCipher::matches_raw`] for keys and blocks that fit a machine word,
    /// with pairs given as `(plaintext, ciphertext)`.
    fn matches_words(&self, key: u64, pairs: &[(u64, u64)]) -> bool {
        let key = BigUint::from(key);
        pairs
            .iter()
            .all(|&(pt, ct)| self.decrypt_raw(&BigUint::from(ct), &key) == BigUint::from(pt))
    }
}

/// `ct = pt ^ key` on 16-bit words.
#[derive(Debug, Clone, Copy, Default)]
pub struct Xor16;

impl Xor16 {
    fn word(v: &BigUint) -> u16 {
        v.to_u16().unwrap_or_default()
    }
}

impl BlockCipher for Xor16 {
    fn block_bits(&self) -> u32 {
        16
    }

    fn key_bits(&self) -> u32 {
        16
    }

    fn encrypt_raw(&self, block: &BigUint, key: &BigUint) -> BigUint {
        BigUint::from(Self::word(block) ^ Self::word(key))
    }

    fn decrypt_raw(&self, block: &BigUint, key: &BigUint) -> BigUint {
        self.encrypt_raw(block, key)
    }

    fn matches_raw(&self, key: &BigUint, pairs: &[KnownPair]) -> bool {
        let k = Self::word(key);
        pairs
            .iter()
            .all(|p| Self::word(p.ciphertext.raw()) ^ k == Self::word(p.plaintext.raw()))
    }

    fn matches_words(&self, key: u64, pairs: &[(u64, u64)]) -> bool {
        pairs.iter().all(|&(pt, ct)| ct ^ key == pt)
    }
}

/// Speck32/64.
#[derive(Debug, Clone, Copy, Default)]
pub struct Speck32_64;

impl Speck32_64 {
    pub const ROUNDS: usize = 22;
    const ALPHA: u32 = 7;
    const BETA: u32 = 2;

    /// Expands a 64-bit key (`l2 l1 l0 k0`, most significant word first).
    pub fn key_schedule(key: u64) -> [u16; Self::ROUNDS] {
        let mut k = key as u16;
        let mut l = [(key >> 16) as u16, (key >> 32) as u16, (key >> 48) as u16];
        let mut rk = [0u16; Self::ROUNDS];
        for (i, slot) in rk.iter_mut().enumerate() {
            *slot = k;
            let j = i % 3;
            l[j] = (k.wrapping_add(l[j].rotate_right(Self::ALPHA))) ^ i as u16;
            k = k.rotate_left(Self::BETA) ^ l[j];
        }
        rk
    }

    pub fn encrypt_block(block: u32, round_keys: &[u16; Self::ROUNDS]) -> u32 {
        let mut x = (block >> 16) as u16;
        let mut y = block as u16;
        for &k in round_keys {
            x = x.rotate_right(Self::ALPHA).wrapping_add(y) ^ k;
            y = y.rotate_left(Self::BETA) ^ x;
        }
        (x as u32) << 16 | y as u32
    }

    pub fn decrypt_block(block: u32, round_keys: &[u16; Self::ROUNDS]) -> u32 {
        let mut x = (block >> 16) as u16;
        let mut y = block as u16;
        for &k in round_keys.iter().rev() {
            y = (y ^ x).rotate_right(Self::BETA);
            x = (x ^ k).wrapping_sub(y).rotate_left(Self::ALPHA);
        }
        (x as u32) << 16 | y as u32
    }

    fn word(v: &BigUint) -> u32 {
        v.to_u32().unwrap_or_default()
    }
}

impl BlockCipher for Speck32_64 {
    fn block_bits(&self) -> u32 {
        32
    }

    fn key_bits(&self) -> u32 {
        64
    }

    fn encrypt_raw(&self, block: &BigUint, key: &BigUint) -> BigUint {
        let rk = Self::key_schedule(key.to_u64().unwrap_or_default());
        BigUint::from(Self::encrypt_block(Self::word(block), &rk))
    }

    fn decrypt_raw(&self, block: &BigUint, key: &BigUint) -> BigUint {
        let rk = Self::key_schedule(key.to_u64().unwrap_or_default());
        BigUint::from(Self::decrypt_block(Self::word(block), &rk))
    }

    fn matches_raw(&self, key: &BigUint, pairs: &[KnownPair]) -> bool {
        let rk = Self::key_schedule(key.to_u64().unwrap_or_default());
        pairs.iter().all(|p| {
            Self::decrypt_block(Self::word(p.ciphertext.raw()), &rk) == Self::word(p.plaintext.raw())
        })
    }

    fn matches_words(&self, key: u64, pairs: &[(u64, u64)]) -> bool {
        let rk = Self::key_schedule(key);
        pairs
            .iter()
            .all(|&(pt, ct)| Self::decrypt_block(ct as u32, &rk) as u64 == pt)
    }
}

/// A registered cipher with its (possibly restricted) key width.
#[derive(Clone)]
pub struct CipherSpec {
    id: String,
    block_bits: u32,
    key_bits: u32,
    inner: Arc<dyn BlockCipher>,
}

impl CipherSpec {
    pub fn new(id: impl Into<String>, inner: Arc<dyn BlockCipher>) -> Self {
        Self {
            id: id.into(),
            block_bits: inner.block_bits(),
            key_bits: inner.key_bits(),
            inner,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn block_bits(&self) -> u32 {
        self.block_bits
    }

    pub fn key_bits(&self) -> u32 {
        self.key_bits
    }

    /// Fixes all but the low `effective_bits` key bits to zero. The derived id is
    /// `<id>-r<bits>`; keys of the derived cipher are zero-extended into the
    /// parent's key.
    pub fn restrict_key(&self, effective_bits: u32) -> Result<CipherSpec> {
        if effective_bits == 0 || effective_bits > self.key_bits {
            return Err(CipherError::InvalidArgument(format!(
                "effective key bits {effective_bits} outside 1..={}",
                self.key_bits
            )));
        }
        Ok(CipherSpec {
            id: format!("{}-r{effective_bits}", self.id),
            block_bits: self.block_bits,
            key_bits: effective_bits,
            inner: Arc::clone(&self.inner),
        })
    }

    /// The parent-width key a restricted key stands for.
    pub fn expand_key(&self, key: &KeyValue) -> Result<KeyValue> {
        self.check_key(key)?;
        Ok(key.with_width(self.inner.key_bits())?)
    }

    pub fn check_key(&self, key: &KeyValue) -> Result<()> {
        if key.bit_width() != self.key_bits {
            return Err(CipherError::InvalidArgument(format!(
                "{} expects a {}-bit key, got {} bits",
                self.id,
                self.key_bits,
                key.bit_width()
            )));
        }
        Ok(())
    }

    pub fn check_block(&self, block: &Block) -> Result<()> {
        if block.bits() != self.block_bits {
            return Err(CipherError::InvalidArgument(format!(
                "{} expects a {}-bit block, got {} bits",
                self.id,
                self.block_bits,
                block.bits()
            )));
        }
        Ok(())
    }

    pub fn check_pairs(&self, pairs: &[KnownPair]) -> Result<()> {
        pairs.iter().try_for_each(|p| {
            self.check_block(&p.plaintext)?;
            self.check_block(&p.ciphertext)
        })
    }

    pub fn encrypt(&self, plaintext: &Block, key: &KeyValue) -> Result<Block> {
        self.check_block(plaintext)?;
        self.check_key(key)?;
        let ct = self.inner.encrypt_raw(plaintext.raw(), key.magnitude());
        Ok(Block(KeyValue::new(ct, self.block_bits)?))
    }

    pub fn decrypt(&self, ciphertext: &Block, key: &KeyValue) -> Result<Block> {
        self.check_block(ciphertext)?;
        self.check_key(key)?;
        let pt = self.inner.decrypt_raw(ciphertext.raw(), key.magnitude());
        Ok(Block(KeyValue::new(pt, self.block_bits)?))
    }

    pub fn make_pair(&self, plaintext: &Block, key: &KeyValue) -> Result<KnownPair> {
        let ct = self.encrypt(plaintext, key)?;
        KnownPair::new(plaintext.clone(), ct)
    }

    /// Success condition with widths checked.
    pub fn verify(&self, key: &KeyValue, pairs: &[KnownPair]) -> Result<bool> {
        self.check_key(key)?;
        self.check_pairs(pairs)?;
        Ok(self.inner.matches_raw(key.magnitude(), pairs))
    }

    /// Success condition for the search loop. Widths must already be checked
    /// with [`CipherSpec::check_key`] and [`CipherSpec::check_pairs`].
    #[inline]
    pub fn matches_unchecked(&self, key: &KeyValue, pairs: &[KnownPair]) -> bool {
        self.inner.matches_raw(key.magnitude(), pairs)
    }
}

/// Known pairs prepared for the search loop, with a machine-word path when keys
/// and blocks fit in 64 bits.
#[derive(Debug, Clone)]
pub struct PairMatcher {
    spec: CipherSpec,
    pairs: Vec<KnownPair>,
    words: Option<Vec<(u64, u64)>>,
}

impl PairMatcher {
    pub fn new(spec: &CipherSpec, pairs: &[KnownPair]) -> Result<Self> {
        spec.check_pairs(pairs)?;
        let words = (spec.key_bits <= 64 && spec.block_bits <= 64).then(|| {
            pairs
                .iter()
                .map(|p| {
                    (
                        p.plaintext.raw().to_u64().unwrap_or_default(),
                        p.ciphertext.raw().to_u64().unwrap_or_default(),
                    )
                })
                .collect()
        });
        Ok(Self {
            spec: spec.clone(),
            pairs: pairs.to_vec(),
            words,
        })
    }

    pub fn spec(&self) -> &CipherSpec {
        &self.spec
    }

    pub fn pairs(&self) -> &[KnownPair] {
        &self.pairs
    }

    pub fn word_sized(&self) -> bool {
        self.words.is_some()
    }

    /// Only meaningful when [`PairMatcher::word_sized`].
    #[inline]
    pub fn matches_word(&self, key: u64) -> bool {
        match &self.words {
            Some(w) => self.spec.inner.matches_words(key, w),
            None => false,
        }
    }

    #[inline]
    pub fn matches(&self, key: &KeyValue) -> bool {
        match (&self.words, key.to_u64()) {
            (Some(w), Some(k)) => self.spec.inner.matches_words(k, w),
            _ => self.spec.matches_unchecked(key, &self.pairs),
        }
    }
}

impl fmt::Debug for CipherSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CipherSpec")
            .field("id", &self.id)
            .field("block_bits", &self.block_bits)
            .field("key_bits", &self.key_bits)
            .finish()
    }
}

impl PartialEq for CipherSpec {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id && self.block_bits == other.block_bits && self.key_bits == other.key_bits
    }
}

/// Ids of the base ciphers in the registry.
pub const REGISTERED: &[&str] = &["xor16", "speck32_64"];

/// Resolves a cipher id, including `-r<bits>` restrictions of registered ciphers.
pub fn registry_lookup(cipher_id: &str) -> Result<CipherSpec> {
    let base = |id: &str| -> Option<CipherSpec> {
        match id {
            "xor16" => Some(CipherSpec::new("xor16", Arc::new(Xor16))),
            "speck32_64" => Some(CipherSpec::new("speck32_64", Arc::new(Speck32_64))),
            _ => None,
        }
    };
    if let Some(spec) = base(cipher_id) {
        return Ok(spec);
    }
    let not_found = || CipherError::NotFound(cipher_id.to_string());
    let (parent, bits) = cipher_id.rsplit_once("-r").ok_or_else(not_found)?;
    if bits.is_empty() || !bits.bytes().all(|b| b.is_ascii_digit()) || bits.starts_with('0') {
        return Err(not_found());
    }
    let bits: u32 = bits.parse().map_err(|_| not_found())?;
    let spec = base(parent).ok_or_else(not_found)?;
    spec.restrict_key(bits).map_err(|_| not_found())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(hex: &str, bits: u32) -> KeyValue {
        KeyValue::from_hex(hex, bits).unwrap()
    }

    fn block(hex: &str, bits: u32) -> Block {
        Block::from_hex(hex, bits).unwrap()
    }

    #[test]
    fn xor16_examples() {
        let xor = registry_lookup("xor16").unwrap();
        let ct = xor.encrypt(&block("1234", 16), &key("00ff", 16)).unwrap();
        assert_eq!(ct.to_hex(), "12cb");
        assert_eq!(xor.decrypt(&ct, &key("00ff", 16)).unwrap().to_hex(), "1234");
        let pt = block("beef", 16);
        assert_eq!(xor.encrypt(&pt, &key("0000", 16)).unwrap(), pt);
    }

    #[test]
    fn speck_published_vector() {
        let speck = registry_lookup("speck32_64").unwrap();
        let k = key("1918111009080100", 64);
        let ct = speck.encrypt(&block("6574694c", 32), &k).unwrap();
        assert_eq!(ct.to_hex(), "a86842f2");
        assert_eq!(speck.decrypt(&ct, &k).unwrap().to_hex(), "6574694c");
    }

    #[test]
    fn word_path_agrees_with_wide_path() {
        for id in REGISTERED {
            let spec = registry_lookup(id).unwrap();
            let bb = spec.block_bits();
            let k = KeyValue::from_u64(0x0123_4567_89ab_cdef & ((1u128 << spec.key_bits()) - 1) as u64, spec.key_bits()).unwrap();
            let pairs: Vec<_> = [0x1111u64, 0xbeef]
                .iter()
                .map(|&pt| spec.make_pair(&Block::from_u64(pt, bb).unwrap(), &k).unwrap())
                .collect();
            let m = PairMatcher::new(&spec, &pairs).unwrap();
            assert!(m.word_sized());
            assert!(m.matches(&k));
            assert!(m.matches_word(k.to_u64().unwrap()));
            let other = k.to_u64().unwrap() ^ 1;
            assert!(!m.matches_word(other));
            assert_eq!(
                spec.matches_unchecked(&KeyValue::from_u64(other, spec.key_bits()).unwrap(), &pairs),
                m.matches_word(other)
            );
        }
    }

    #[test]
    fn restriction() {
        let speck = registry_lookup("speck32_64").unwrap();
        let full = speck.restrict_key(64).unwrap();
        let k = key("1918111009080100", 64);
        let pt = block("6574694c", 32);
        assert_eq!(full.encrypt(&pt, &k).unwrap(), speck.encrypt(&pt, &k).unwrap());

        let r20 = speck.restrict_key(20).unwrap();
        assert_eq!(r20.id(), "speck32_64-r20");
        assert_eq!(r20.key_bits(), 20);
        let short = key("12345", 20);
        assert_eq!(
            r20.encrypt(&pt, &short).unwrap(),
            speck.encrypt(&pt, &key("0000000000012345", 64)).unwrap()
        );

        let xor8 = registry_lookup("xor16").unwrap().restrict_key(8).unwrap();
        assert_eq!(xor8.expand_key(&key("ab", 8)).unwrap().to_hex(), "00ab");

        assert!(speck.restrict_key(0).is_err());
        assert!(speck.restrict_key(65).is_err());
    }

    #[test]
    fn registry() {
        let xor = registry_lookup("xor16").unwrap();
        assert_eq!((xor.block_bits(), xor.key_bits()), (16, 16));
        let speck = registry_lookup("speck32_64").unwrap();
        assert_eq!((speck.block_bits(), speck.key_bits()), (32, 64));
        assert_eq!(
            registry_lookup("nonexistent"),
            Err(CipherError::NotFound("nonexistent".into()))
        );
        assert_eq!(registry_lookup("xor16-r4").unwrap().key_bits(), 4);
        for bad in ["xor16-r0", "xor16-r17", "xor16-r", "xor16-r04", "nope-r4", "xor16-rx"] {
            assert!(registry_lookup(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn width_mismatches_are_rejected() {
        let speck = registry_lookup("speck32_64").unwrap();
        let pt = block("6574694c", 32);
        assert!(speck.encrypt(&pt, &key("12", 8)).is_err());
        assert!(speck.encrypt(&block("1234", 16), &key("0", 64 / 16)).is_err());
        let xor = registry_lookup("xor16").unwrap();
        assert!(xor.decrypt(&pt, &key("0000", 16)).is_err());
    }

    #[test]
    fn verify_needs_every_pair() {
        let xor = registry_lookup("xor16").unwrap();
        let k = key("444c", 16);
        let good = KnownPair::parse("1234:5678", 16).unwrap();
        let other = xor.make_pair(&block("0001", 16), &key("0002", 16)).unwrap();
        assert!(xor.verify(&k, std::slice::from_ref(&good)).unwrap());
        assert!(!xor.verify(&k, &[good, other]).unwrap());
        assert!(KnownPair::parse("1234", 16).is_err());
    }
}
