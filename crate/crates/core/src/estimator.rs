//! Exhaustion-time arithmetic for a key space split across many devices.
//!
//! Everything is exact rational arithmetic; rounding happens only when a value
//! is rendered.

use std::fmt;

use num_bigint::{BigInt, BigUint};
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Pow, Signed, ToPrimitive, Zero};
use serde::Serialize;
use thiserror::Error;

pub const SECONDS_PER_DAY: u32 = 86_400;
/// Largest key width accepted.
pub const MAX_ESTIMATE_BITS: u32 = 1 << 16;
const MAX_EXPONENT: i64 = 100_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EstimateError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("cannot parse {text:?} as a number: {reason}")]
    BadNumber { text: String, reason: &'static str },
}

pub type Result<T> = std::result::Result<T, EstimateError>;

/// Parses decimal text such as `1000`, `2.5`, `1e6` or `1.5E-3` exactly.
pub fn parse_exact(text: &str) -> Result<BigRational> {
    let bad = |reason| EstimateError::BadNumber {
        text: text.to_string(),
        reason,
    };
    let t = text.trim();
    let (mantissa, exponent) = match t.find(['e', 'E']) {
        Some(i) => (&t[..i], Some(&t[i + 1..])),
        None => (t, None),
    };
    let (int_part, frac_part) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(bad("no digits"));
    }
    if !int_part.bytes().chain(frac_part.bytes()).all(|b| b.is_ascii_digit()) {
        return Err(bad("expected digits"));
    }
    let mut exp: i64 = match exponent {
        None => 0,
        Some(e) => {
            let digits = e.strip_prefix(['+', '-']).unwrap_or(e);
            if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || digits.len() > 7 {
                return Err(bad("bad exponent"));
            }
            e.parse().map_err(|_| bad("bad exponent"))?
        }
    };
    exp -= frac_part.len() as i64;
    if exp.abs() > MAX_EXPONENT {
        return Err(bad("exponent out of range"));
    }
    let digits = format!("{int_part}{frac_part}");
    let m: BigInt = digits.parse().map_err(|_| bad("expected digits"))?;
    let ten = BigInt::from(10u32);
    let scale = Pow::pow(&ten, exp.unsigned_abs());
    Ok(if exp >= 0 {
        BigRational::from_integer(m * scale)
    } else {
        BigRational::new(m, scale)
    })
}

/// A positive rational together with its rendering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quantity(pub BigRational);

impl Quantity {
    /// Four significant figures: fixed notation for magnitudes in
    /// `[0.001, 10000)`, scientific otherwise.
    pub fn sig4(&self) -> String {
        render_sig(&self.0, 4)
    }

    /// Nearest integer, halves rounded up.
    pub fn rounded(&self) -> BigInt {
        let two = BigInt::from(2u32);
        (self.0.numer() * &two + self.0.denom()).div_floor(&(self.0.denom() * two))
    }

    /// Exact decimal when the expansion terminates, `p/q` otherwise.
    pub fn exact(&self) -> String {
        exact_decimal(&self.0)
    }

    pub fn to_f64(&self) -> f64 {
        self.0.to_f64().unwrap_or(f64::INFINITY)
    }
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.sig4())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Estimate {
    pub key_bits: u32,
    pub devices: BigUint,
    /// Keys per second per device.
    pub rate: BigRational,
    /// Keys each device must cover, `2^u / n`.
    pub subspace_keys: Quantity,
    /// Time to exhaust a sub-space.
    pub worst_case_seconds: Quantity,
    pub worst_case_days: Quantity,
    /// Half the worst case.
    pub expected_days: Quantity,
}

pub fn estimate(key_bits: u32, devices: &BigUint, rate: &BigRational) -> Result<Estimate> {
    if key_bits == 0 || key_bits > MAX_ESTIMATE_BITS {
        return Err(EstimateError::InvalidArgument(format!(
            "key bits must be in 1..={MAX_ESTIMATE_BITS}, got {key_bits}"
        )));
    }
    if devices.is_zero() {
        return Err(EstimateError::InvalidArgument("devices must be at least 1".into()));
    }
    if !rate.is_positive() {
        return Err(EstimateError::InvalidArgument("rate must be positive".into()));
    }
    let space = BigRational::from_integer(BigInt::one() << key_bits as usize);
    let n = BigRational::from_integer(BigInt::from(devices.clone()));
    let subspace = space / n;
    let seconds = &subspace / rate;
    let days = &seconds / BigRational::from_integer(SECONDS_PER_DAY.into());
    let expected = &days / BigRational::from_integer(2.into());
    Ok(Estimate {
        key_bits,
        devices: devices.clone(),
        rate: rate.clone(),
        subspace_keys: Quantity(subspace),
        worst_case_seconds: Quantity(seconds),
        worst_case_days: Quantity(days),
        expected_days: Quantity(expected),
    })
}

/// [`estimate`] from command-line text; `devices` must denote a whole number.
pub fn estimate_from_text(key_bits: &str, devices: &str, rate: &str) -> Result<Estimate> {
    let u = parse_exact(key_bits)?;
    let u = u
        .is_integer()
        .then(|| u.to_integer().to_u32())
        .flatten()
        .ok_or_else(|| EstimateError::InvalidArgument(format!("key bits {key_bits:?} is not a whole number")))?;
    let n = parse_exact(devices)?;
    if !n.is_integer() || n.is_negative() {
        return Err(EstimateError::InvalidArgument(format!(
            "devices {devices:?} is not a whole number"
        )));
    }
    let n = n.to_integer().to_biguint().expect("non-negative");
    estimate(u, &n, &parse_exact(rate)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateRow {
    pub key_bits: u32,
    pub devices: String,
    pub rate: String,
    pub subspace_keys: String,
    pub subspace_keys_exact: String,
    pub worst_case_seconds: String,
    pub worst_case_days: String,
    pub expected_days: String,
}

impl Estimate {
    pub fn row(&self) -> EstimateRow {
        EstimateRow {
            key_bits: self.key_bits,
            devices: self.devices.to_string(),
            rate: exact_decimal(&self.rate),
            subspace_keys: self.subspace_keys.rounded().to_string(),
            subspace_keys_exact: self.subspace_keys.exact(),
            worst_case_seconds: self.worst_case_seconds.sig4(),
            worst_case_days: self.worst_case_days.sig4(),
            expected_days: self.expected_days.sig4(),
        }
    }

    pub fn table(&self) -> String {
        let r = self.row();
        let lines = [
            ("key bits", r.key_bits.to_string()),
            ("devices", r.devices),
            ("rate (keys/s/device)", r.rate),
            (
                "sub-space (keys)",
                format!("{} (exact {})", r.subspace_keys, r.subspace_keys_exact),
            ),
            ("worst case (s)", r.worst_case_seconds),
            ("worst case (days)", r.worst_case_days),
            ("expected (days)", r.expected_days),
        ];
        let mut out = String::new();
        for (k, v) in lines {
            out.push_str(&format!("{k:<22} {v}\n"));
        }
        out
    }

    pub const CSV_HEADER: &'static str =
        "key_bits,devices,rate,subspace_keys,worst_case_seconds,worst_case_days,expected_days";

    pub fn csv_line(&self) -> String {
        let r = self.row();
        format!(
            "{},{},{},{},{},{},{}",
            r.key_bits,
            r.devices,
            r.rate,
            r.subspace_keys,
            r.worst_case_seconds,
            r.worst_case_days,
            r.expected_days
        )
    }
}

/// Largest `e` with `10^e <= x`, for positive `x`.
fn decimal_exponent(x: &BigRational) -> i64 {
    let ten = BigInt::from(10u32);
    let digits = |v: &BigInt| v.to_string().len() as i64;
    let mut e = digits(x.numer()) - digits(x.denom());
    let pow10 = |e: i64| -> BigRational {
        let p = Pow::pow(&ten, e.unsigned_abs());
        if e >= 0 {
            BigRational::from_integer(p)
        } else {
            BigRational::new(BigInt::one(), p)
        }
    };
    while pow10(e) > *x {
        e -= 1;
    }
    while pow10(e + 1) <= *x {
        e += 1;
    }
    e
}

fn render_sig(x: &BigRational, sig: u32) -> String {
    if x.is_zero() {
        return "0".into();
    }
    if x.is_negative() {
        return format!("-{}", render_sig(&-x, sig));
    }
    let ten = BigInt::from(10u32);
    let mut e = decimal_exponent(x);
    let shift = sig as i64 - 1 - e;
    let scaled = if shift >= 0 {
        x * BigRational::from_integer(Pow::pow(&ten, shift as u64))
    } else {
        x / BigRational::from_integer(Pow::pow(&ten, shift.unsigned_abs()))
    };
    let mut m = Quantity(scaled).rounded();
    if m == Pow::pow(&ten, sig as u64) {
        m /= &ten;
        e += 1;
    }
    let digits = m.to_string();
    debug_assert_eq!(digits.len(), sig as usize);
    if (-3..=3).contains(&e) {
        if e >= 0 {
            let (int, frac) = digits.split_at(e as usize + 1);
            if frac.is_empty() {
                int.to_string()
            } else {
                format!("{int}.{frac}")
            }
        } else {
            format!("0.{}{digits}", "0".repeat((-e - 1) as usize))
        }
    } else {
        let (lead, rest) = digits.split_at(1);
        if rest.is_empty() {
            format!("{lead}e{e}")
        } else {
            format!("{lead}.{rest}e{e}")
        }
    }
}

fn exact_decimal(x: &BigRational) -> String {
    let d = x.denom();
    let two = BigInt::from(2u32);
    let five = BigInt::from(5u32);
    let (mut a, mut b) = (0u64, 0u64);
    let mut rest = d.clone();
    while rest.is_even() {
        rest /= &two;
        a += 1;
    }
    while (&rest % &five).is_zero() {
        rest /= &five;
        b += 1;
    }
    if !rest.is_one() {
        return format!("{}/{}", x.numer(), d);
    }
    let places = a.max(b);
    let scaled = x * BigRational::from_integer(Pow::pow(&BigInt::from(10u32), places));
    let n = scaled.to_integer();
    if places == 0 {
        return n.to_string();
    }
    let (sign, n) = if n.is_negative() { ("-", -n) } else { ("", n) };
    let s = format!("{:0>width$}", n.to_string(), width = places as usize + 1);
    let (int, frac) = s.split_at(s.len() - places as usize);
    format!("{sign}{int}.{frac}")
}
