//! Key values, inclusive key ranges and n-way partitioning of a `2^u` key space.
//!
//! Keys are arbitrary-precision integers tagged with their bit width. The only
//! text form is lowercase, zero-padded, big-endian hex with `ceil(u / 4)` digits;
//! it is used verbatim on the wire and in the journal.

use std::cmp::Ordering;
use std::fmt;

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, ToPrimitive, Zero};
use thiserror::Error;

/// Widest key accepted anywhere. Bounds the memory a hostile `key_bits` can demand.
pub const MAX_KEY_BITS: u32 = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KeyspaceError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("key range exhausted")]
    RangeExhausted,
    #[error("malformed hex key {text:?} for a {bits}-bit space: {reason}")]
    BadHex {
        text: String,
        bits: u32,
        reason: &'static str,
    },
}

pub type Result<T> = std::result::Result<T, KeyspaceError>;

fn check_width(bit_width: u32) -> Result<()> {
    if bit_width == 0 || bit_width > MAX_KEY_BITS {
        return Err(KeyspaceError::InvalidArgument(format!(
            "bit width {bit_width} outside 1..={MAX_KEY_BITS}"
        )));
    }
    Ok(())
}

/// Number of keys in a `bits`-wide space, `2^bits`.
pub fn space_size(bits: u32) -> BigUint {
    BigUint::one() << bits as usize
}

/// Number of hex digits in the canonical form of a `bits`-wide value.
pub fn hex_digits(bits: u32) -> usize {
    bits.div_ceil(4) as usize
}

/// A key (or block) value together with the width of the space it lives in.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct KeyValue {
    magnitude: BigUint,
    bit_width: u32,
}

impl KeyValue {
    pub fn new(magnitude: BigUint, bit_width: u32) -> Result<Self> {
        check_width(bit_width)?;
        if magnitude.bits() > bit_width as u64 {
            return Err(KeyspaceError::InvalidArgument(format!(
                "value {magnitude:x} does not fit in {bit_width} bits"
            )));
        }
        Ok(Self {
            magnitude,
            bit_width,
        })
    }

    pub fn from_u64(value: u64, bit_width: u32) -> Result<Self> {
        Self::new(BigUint::from(value), bit_width)
    }

    pub fn zero(bit_width: u32) -> Result<Self> {
        Self::new(BigUint::zero(), bit_width)
    }

    /// Largest key of the space, `2^u - 1`.
    pub fn max(bit_width: u32) -> Result<Self> {
        check_width(bit_width)?;
        Ok(Self {
            magnitude: space_size(bit_width) - 1u32,
            bit_width,
        })
    }

    /// Parses the canonical form: exactly `ceil(u/4)` lowercase hex digits,
    /// with any unused bits of the top digit clear.
    pub fn from_hex(text: &str, bit_width: u32) -> Result<Self> {
        check_width(bit_width)?;
        let bad = |reason| KeyspaceError::BadHex {
            text: text.chars().take(80).collect(),
            bits: bit_width,
            reason,
        };
        if text.len() != hex_digits(bit_width) {
            return Err(bad("wrong number of digits"));
        }
        if !text.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(bad("not lowercase hex"));
        }
        let magnitude = BigUint::parse_bytes(text.as_bytes(), 16).ok_or_else(|| bad("not hex"))?;
        if magnitude.bits() > bit_width as u64 {
            return Err(bad("value outside the key space"));
        }
        Ok(Self {
            magnitude,
            bit_width,
        })
    }

    /// Parses a string of `0`/`1` digits, one per bit.
    pub fn from_binary(text: &str) -> Result<Self> {
        let bits = u32::try_from(text.len())
            .map_err(|_| KeyspaceError::InvalidArgument("binary key too long".into()))?;
        check_width(bits)?;
        let magnitude = BigUint::parse_bytes(text.as_bytes(), 2).ok_or_else(|| {
            KeyspaceError::InvalidArgument(format!("{text:?} is not a binary string"))
        })?;
        Self::new(magnitude, bits)
    }

    pub fn magnitude(&self) -> &BigUint {
        &self.magnitude
    }

    pub fn bit_width(&self) -> u32 {
        self.bit_width
    }

    pub fn to_u64(&self) -> Option<u64> {
        self.magnitude.to_u64()
    }

    pub fn to_hex(&self) -> String {
        format!("{:0width$x}", self.magnitude, width = hex_digits(self.bit_width))
    }

    pub fn to_binary(&self) -> String {
        format!("{:0width$b}", self.magnitude, width = self.bit_width as usize)
    }

    pub fn is_max(&self) -> bool {
        self.magnitude.bits() == self.bit_width as u64
            && self.magnitude.trailing_ones() == self.bit_width as u64
    }

    /// The next key, or [`KeyspaceError::RangeExhausted`] at the top of the space.
    pub fn increment(&self) -> Result<Self> {
        let mut next = self.clone();
        next.increment_in_place()?;
        Ok(next)
    }

    /// In-place form of [`KeyValue::increment`]; leaves `self` untouched on overflow.
    pub fn increment_in_place(&mut self) -> Result<()> {
        if self.is_max() {
            return Err(KeyspaceError::RangeExhausted);
        }
        self.magnitude += 1u32;
        Ok(())
    }

    /// The previous key, or [`KeyspaceError::RangeExhausted`] at zero.
    pub fn decrement(&self) -> Result<Self> {
        if self.magnitude.is_zero() {
            return Err(KeyspaceError::RangeExhausted);
        }
        Ok(Self {
            magnitude: &self.magnitude - 1u32,
            bit_width: self.bit_width,
        })
    }

    /// Same magnitude re-tagged with a different width.
    pub fn with_width(&self, bit_width: u32) -> Result<Self> {
        Self::new(self.magnitude.clone(), bit_width)
    }

    pub(crate) fn offset(&self, delta: &BigUint) -> Result<Self> {
        Self::new(&self.magnitude + delta, self.bit_width)
    }
}

impl PartialOrd for KeyValue {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for KeyValue {
    fn cmp(&self, other: &Self) -> Ordering {
        self.magnitude
            .cmp(&other.magnitude)
            .then(self.bit_width.cmp(&other.bit_width))
    }
}

impl fmt::Display for KeyValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for KeyValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{}/{}", self.to_hex(), self.bit_width)
    }
}

/// An inclusive `[first, last]` run of keys of one width.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct KeyRange {
    first: KeyValue,
    last: KeyValue,
}

impl KeyRange {
    pub fn new(first: KeyValue, last: KeyValue) -> Result<Self> {
        if first.bit_width != last.bit_width {
            return Err(KeyspaceError::InvalidArgument(format!(
                "range endpoints have widths {} and {}",
                first.bit_width, last.bit_width
            )));
        }
        if first.magnitude > last.magnitude {
            return Err(KeyspaceError::InvalidArgument(format!(
                "range first {first} is above last {last}"
            )));
        }
        Ok(Self { first, last })
    }

    /// `[0, 2^u - 1]`.
    pub fn full(bit_width: u32) -> Result<Self> {
        Ok(Self {
            first: KeyValue::zero(bit_width)?,
            last: KeyValue::max(bit_width)?,
        })
    }

    pub fn single(key: KeyValue) -> Self {
        Self {
            first: key.clone(),
            last: key,
        }
    }

    pub fn from_hex(first: &str, last: &str, bit_width: u32) -> Result<Self> {
        Self::new(
            KeyValue::from_hex(first, bit_width)?,
            KeyValue::from_hex(last, bit_width)?,
        )
    }

    pub fn first(&self) -> &KeyValue {
        &self.first
    }

    pub fn last(&self) -> &KeyValue {
        &self.last
    }

    pub fn bit_width(&self) -> u32 {
        self.first.bit_width
    }

    /// `last - first + 1`.
    pub fn size(&self) -> BigUint {
        &self.last.magnitude - &self.first.magnitude + 1u32
    }

    pub fn contains(&self, key: &KeyValue) -> bool {
        key.bit_width == self.bit_width() && self.first <= *key && *key <= self.last
    }

    pub fn overlaps(&self, other: &KeyRange) -> bool {
        self.first <= other.last && other.first <= self.last
    }

    /// Keys strictly after `checkpoint`, or `None` if the checkpoint is `last`.
    pub fn after(&self, checkpoint: &KeyValue) -> Result<Option<KeyRange>> {
        self.ensure_contains(checkpoint)?;
        if *checkpoint == self.last {
            return Ok(None);
        }
        Ok(Some(KeyRange {
            first: checkpoint.increment()?,
            last: self.last.clone(),
        }))
    }

    /// Keys from `first` through `checkpoint` inclusive.
    pub fn through(&self, checkpoint: &KeyValue) -> Result<KeyRange> {
        self.ensure_contains(checkpoint)?;
        Ok(KeyRange {
            first: self.first.clone(),
            last: checkpoint.clone(),
        })
    }

    fn ensure_contains(&self, key: &KeyValue) -> Result<()> {
        if !self.contains(key) {
            return Err(KeyspaceError::InvalidArgument(format!(
                "key {key} outside range {self}"
            )));
        }
        Ok(())
    }

    /// Ascending enumeration of every key in the range.
    pub fn keys(&self) -> Keys {
        Keys {
            next: Some(self.first.clone()),
            last: self.last.clone(),
        }
    }

    /// Resumes enumeration after a checkpoint (the last key already tried).
    pub fn keys_after(&self, checkpoint: &KeyValue) -> Result<Keys> {
        self.ensure_contains(checkpoint)?;
        let next = if *checkpoint == self.last {
            None
        } else {
            Some(checkpoint.increment()?)
        };
        Ok(Keys {
            next,
            last: self.last.clone(),
        })
    }

    /// Splits into `n` contiguous ascending ranges whose sizes differ by at most
    /// one; the lowest `size mod n` ranges carry the extra key.
    pub fn split(&self, n: u64) -> Result<Vec<KeyRange>> {
        if n == 0 {
            return Err(KeyspaceError::InvalidArgument(
                "cannot split into zero ranges".into(),
            ));
        }
        let total = self.size();
        let parts = BigUint::from(n);
        if parts > total {
            return Err(KeyspaceError::InvalidArgument(format!(
                "cannot split {total} keys into {n} non-empty ranges"
            )));
        }
        let (base, extra) = total.div_rem(&parts);
        let extra = extra.to_u64().expect("remainder below n");
        let mut ranges = Vec::with_capacity(n as usize);
        let mut start = self.first.clone();
        for i in 0..n {
            let len = if i < extra { &base + 1u32 } else { base.clone() };
            let end = start.offset(&(len - 1u32))?;
            let next = if end == self.last {
                None
            } else {
                Some(end.increment()?)
            };
            ranges.push(KeyRange { first: start, last: end });
            match next {
                Some(n) => start = n,
                None => break,
            }
        }
        debug_assert_eq!(ranges.len() as u64, n);
        Ok(ranges)
    }

    /// Cuts the first `keys` keys off the range: `(head, rest)`.
    pub fn take_front(&self, keys: &BigUint) -> Result<(KeyRange, Option<KeyRange>)> {
        if keys.is_zero() {
            return Err(KeyspaceError::InvalidArgument("empty chunk".into()));
        }
        if *keys >= self.size() {
            return Ok((self.clone(), None));
        }
        let end = self.first.offset(&(keys - 1u32))?;
        let rest = KeyRange {
            first: end.increment()?,
            last: self.last.clone(),
        };
        Ok((
            KeyRange {
                first: self.first.clone(),
                last: end,
            },
            Some(rest),
        ))
    }
}

impl fmt::Display for KeyRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}-{}]", self.first, self.last)
    }
}

impl fmt::Debug for KeyRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}-{}]/{}", self.first, self.last, self.bit_width())
    }
}

/// `last - first + 1` as a free function.
pub fn range_size(range: &KeyRange) -> BigUint {
    range.size()
}

/// Next-key-by-increment iterator over a [`KeyRange`].
#[derive(Debug, Clone)]
pub struct Keys {
    next: Option<KeyValue>,
    last: KeyValue,
}

impl Iterator for Keys {
    type Item = KeyValue;

    fn next(&mut self) -> Option<KeyValue> {
        let current = self.next.take()?;
        if current != self.last {
            self.next = current.increment().ok();
        }
        Some(current)
    }
}

/// The whole `2^u` space split into contiguous, balanced ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    key_bits: u32,
    ranges: Vec<KeyRange>,
}

impl Partition {
    pub fn key_bits(&self) -> u32 {
        self.key_bits
    }

    pub fn ranges(&self) -> &[KeyRange] {
        &self.ranges
    }

    pub fn into_ranges(self) -> Vec<KeyRange> {
        self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }
}

/// Divides `[0, 2^u - 1]` into `n` exclusive ranges.
pub fn partition(key_bits: u32, n: u64) -> Result<Partition> {
    let ranges = KeyRange::full(key_bits)?.split(n)?;
    Ok(Partition { key_bits, ranges })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bin(s: &str) -> KeyValue {
        KeyValue::from_binary(s).unwrap()
    }

    #[test]
    fn four_bit_space_four_ways() {
        let p = partition(4, 4).unwrap();
        let got: Vec<(String, String)> = p
            .ranges()
            .iter()
            .map(|r| (r.first().to_binary(), r.last().to_binary()))
            .collect();
        let want = [
            ("0000", "0011"),
            ("0100", "0111"),
            ("1000", "1011"),
            ("1100", "1111"),
        ];
        assert_eq!(got.len(), 4);
        for ((gf, gl), (wf, wl)) in got.iter().zip(want) {
            assert_eq!((gf.as_str(), gl.as_str()), (wf, wl));
        }
    }

    #[test]
    fn identity_partition() {
        let p = partition(4, 1).unwrap();
        assert_eq!(p.ranges(), &[KeyRange::full(4).unwrap()]);
        assert_eq!(p.ranges()[0].size(), BigUint::from(16u32));
    }

    #[test]
    fn remainder_goes_to_lowest_ranges() {
        let p = partition(4, 3).unwrap();
        let sizes: Vec<u64> = p.ranges().iter().map(|r| r.size().to_u64().unwrap()).collect();
        assert_eq!(sizes, [6, 5, 5]);
        // every key lands in exactly one range
        for k in 0..16u64 {
            let key = KeyValue::from_u64(k, 4).unwrap();
            assert_eq!(p.ranges().iter().filter(|r| r.contains(&key)).count(), 1);
        }
    }

    #[test]
    fn des_sized_partition() {
        let p = partition(56, 1_000_000).unwrap();
        let small = BigUint::from(72_057_594_037u64);
        let big = BigUint::from(72_057_594_038u64);
        let mut total = BigUint::zero();
        for r in p.ranges() {
            let s = r.size();
            assert!(s == small || s == big);
            total += s;
        }
        assert_eq!(total, BigUint::from(72_057_594_037_927_936u64));
        // 2^56 mod 10^6 = 927936 ranges carry the extra key
        let big_count = p.ranges().iter().filter(|r| r.size() == big).count();
        assert_eq!(big_count, 927_936);
    }

    #[test]
    fn partition_rejects_bad_counts() {
        assert!(matches!(partition(4, 0), Err(KeyspaceError::InvalidArgument(_))));
        assert!(matches!(partition(4, 17), Err(KeyspaceError::InvalidArgument(_))));
        assert!(partition(4, 16).is_ok());
        assert!(partition(0, 1).is_err());
    }

    #[test]
    fn increment_carries_and_stops_at_top() {
        let k = KeyValue::from_hex("00ff", 16).unwrap();
        assert_eq!(k.increment().unwrap().to_hex(), "0100");
        assert_eq!(KeyValue::from_hex("0", 4).unwrap().increment().unwrap().to_hex(), "1");
        let top = KeyValue::from_hex("f", 4).unwrap();
        assert_eq!(top.increment(), Err(KeyspaceError::RangeExhausted));
        let mut top2 = top.clone();
        assert!(top2.increment_in_place().is_err());
        assert_eq!(top2, top);
    }

    #[test]
    fn enumerate_second_device_range() {
        let r = KeyRange::new(bin("0100"), bin("0111")).unwrap();
        let keys: Vec<String> = r.keys().map(|k| k.to_binary()).collect();
        assert_eq!(keys, ["0100", "0101", "0110", "0111"]);
        let k = bin("1001");
        assert_eq!(KeyRange::single(k.clone()).keys().collect::<Vec<_>>(), vec![k]);
    }

    #[test]
    fn resume_matches_full_enumeration_suffix() {
        let r = KeyRange::full(4).unwrap();
        let checkpoint = bin("1010");
        let resumed: Vec<KeyValue> = r.keys_after(&checkpoint).unwrap().collect();
        let oracle: Vec<KeyValue> = r.keys().skip_while(|k| *k <= checkpoint).collect();
        assert_eq!(resumed.len(), 5);
        assert_eq!(resumed, oracle);
        assert_eq!(r.keys_after(r.last()).unwrap().count(), 0);
        assert!(r.keys_after(&KeyValue::from_u64(1, 5).unwrap()).is_err());
    }

    #[test]
    fn range_sizes() {
        let r = KeyRange::new(bin("0000"), bin("0011")).unwrap();
        assert_eq!(range_size(&r), BigUint::from(4u32));
        assert_eq!(range_size(&KeyRange::single(bin("0110"))), BigUint::one());
        let oracle = (0..56).fold(BigUint::one(), |acc, _| acc * 2u32);
        assert_eq!(range_size(&KeyRange::full(56).unwrap()), oracle);
    }

    #[test]
    fn hex_form_is_canonical() {
        assert_eq!(KeyValue::from_u64(0x5, 10).unwrap().to_hex(), "005");
        assert!(KeyValue::from_hex("005", 10).is_ok());
        // top digit of a 10-bit value only has two usable bits
        assert!(KeyValue::from_hex("3ff", 10).is_ok());
        assert!(KeyValue::from_hex("400", 10).is_err());
        assert!(KeyValue::from_hex("05", 10).is_err());
        assert!(KeyValue::from_hex("00A", 10).is_err());
        assert!(KeyValue::from_hex("ffff", 4).is_err());
        assert!(KeyValue::from_hex("", 4).is_err());
        assert!(KeyValue::from_hex("+1", 8).is_err());
    }

    #[test]
    fn wide_keys_work() {
        let top = KeyValue::max(1024).unwrap();
        assert_eq!(top.to_hex(), "f".repeat(256));
        assert!(top.is_max());
        assert!(top.increment().is_err());
        let p = partition(1024, 3).unwrap();
        let sum = p.ranges().iter().fold(BigUint::zero(), |a, r| a + r.size());
        assert_eq!(sum, space_size(1024));
    }

    #[test]
    fn split_and_checkpoint_helpers() {
        let r = KeyRange::from_hex("10", "1f", 8).unwrap();
        let (head, rest) = r.take_front(&BigUint::from(4u32)).unwrap();
        assert_eq!(head, KeyRange::from_hex("10", "13", 8).unwrap());
        assert_eq!(rest.unwrap(), KeyRange::from_hex("14", "1f", 8).unwrap());
        let (all, none) = r.take_front(&BigUint::from(100u32)).unwrap();
        assert_eq!(all, r);
        assert!(none.is_none());

        let mid = KeyValue::from_hex("17", 8).unwrap();
        assert_eq!(r.through(&mid).unwrap(), KeyRange::from_hex("10", "17", 8).unwrap());
        assert_eq!(r.after(&mid).unwrap().unwrap(), KeyRange::from_hex("18", "1f", 8).unwrap());
        assert_eq!(r.after(r.last()).unwrap(), None);
    }
}
