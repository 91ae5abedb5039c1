//! Coordinator/agent wire protocol.
//!
//! One message per line: a UTF-8 JSON object with a `"type"` discriminator,
//! terminated by LF. Key and block fields carry the canonical lowercase hex form
//! from [`crate::keyspace`]. Unknown fields are ignored; unknown message types
//! are errors.

use std::io::{self, BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cipher::{Block, KnownPair};
use crate::keyspace::{hex_digits, KeyRange, KeyValue, MAX_KEY_BITS};

pub const DEFAULT_PORT: u16 = 4160;

/// Longest accepted line, terminator included.
pub const MAX_LINE_BYTES: usize = 64 * 1024;

const MAX_ID_BYTES: usize = 256;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("invalid field {field}: {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error("line exceeds {MAX_LINE_BYTES} bytes")]
    LineTooLong,
    #[error("connection i/o: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Found,
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairHex {
    pub pt: String,
    pub ct: String,
}

impl From<&KnownPair> for PairHex {
    fn from(p: &KnownPair) -> Self {
        PairHex {
            pt: p.plaintext.to_hex(),
            ct: p.ciphertext.to_hex(),
        }
    }
}

impl PairHex {
    pub fn to_pair(&self, block_bits: u32) -> crate::cipher::Result<KnownPair> {
        KnownPair::new(
            Block::from_hex(&self.pt, block_bits)?,
            Block::from_hex(&self.ct, block_bits)?,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Hello {
        agent_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rate_hint: Option<f64>,
    },
    Assign {
        job_id: String,
        cipher_id: String,
        key_bits: u32,
        first_key: String,
        last_key: String,
        pairs: Vec<PairHex>,
    },
    Progress {
        job_id: String,
        current_key: String,
        keys_tried: u64,
    },
    Found {
        job_id: String,
        key: String,
    },
    Exhausted {
        job_id: String,
    },
    Stop {
        reason: StopReason,
    },
    Error {
        code: String,
        detail: String,
    },
}

impl Message {
    pub fn hello(agent_id: impl Into<String>, rate_hint: Option<f64>) -> Self {
        Message::Hello {
            agent_id: agent_id.into(),
            rate_hint,
        }
    }

    pub fn assign(
        job_id: impl Into<String>,
        cipher_id: impl Into<String>,
        range: &KeyRange,
        pairs: &[KnownPair],
    ) -> Self {
        Message::Assign {
            job_id: job_id.into(),
            cipher_id: cipher_id.into(),
            key_bits: range.bit_width(),
            first_key: range.first().to_hex(),
            last_key: range.last().to_hex(),
            pairs: pairs.iter().map(PairHex::from).collect(),
        }
    }

    pub fn progress(job_id: impl Into<String>, current: &KeyValue, keys_tried: u64) -> Self {
        Message::Progress {
            job_id: job_id.into(),
            current_key: current.to_hex(),
            keys_tried,
        }
    }

    pub fn found(job_id: impl Into<String>, key: &KeyValue) -> Self {
        Message::Found {
            job_id: job_id.into(),
            key: key.to_hex(),
        }
    }

    pub fn exhausted(job_id: impl Into<String>) -> Self {
        Message::Exhausted {
            job_id: job_id.into(),
        }
    }

    pub fn stop(reason: StopReason) -> Self {
        Message::Stop { reason }
    }

    pub fn error(code: impl Into<String>, detail: impl Into<String>) -> Self {
        Message::Error {
            code: code.into(),
            detail: detail.into(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "hello",
            Message::Assign { .. } => "assign",
            Message::Progress { .. } => "progress",
            Message::Found { .. } => "found",
            Message::Exhausted { .. } => "exhausted",
            Message::Stop { .. } => "stop",
            Message::Error { .. } => "error",
        }
    }

    /// The key range of an `Assign`.
    pub fn assigned_range(&self) -> Option<Result<KeyRange>> {
        match self {
            Message::Assign {
                key_bits,
                first_key,
                last_key,
                ..
            } => Some(
                KeyRange::from_hex(first_key, last_key, *key_bits).map_err(|e| {
                    ProtocolError::InvalidField {
                        field: "first_key",
                        reason: e.to_string(),
                    }
                }),
            ),
            _ => None,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Message::Hello {
                agent_id,
                rate_hint,
            } => {
                check_id("agent_id", agent_id)?;
                if let Some(r) = rate_hint {
                    if !r.is_finite() || *r < 0.0 {
                        return Err(invalid("rate_hint", "must be a finite non-negative number"));
                    }
                }
            }
            Message::Assign {
                job_id,
                cipher_id,
                key_bits,
                first_key,
                last_key,
                pairs,
            } => {
                check_id("job_id", job_id)?;
                check_id("cipher_id", cipher_id)?;
                if *key_bits == 0 || *key_bits > MAX_KEY_BITS {
                    return Err(invalid("key_bits", format!("outside 1..={MAX_KEY_BITS}")));
                }
                let first = KeyValue::from_hex(first_key, *key_bits)
                    .map_err(|e| invalid("first_key", e.to_string()))?;
                let last = KeyValue::from_hex(last_key, *key_bits)
                    .map_err(|e| invalid("last_key", e.to_string()))?;
                if first > last {
                    return Err(invalid("last_key", "below first_key"));
                }
                for p in pairs {
                    check_hex("pt", &p.pt)?;
                    check_hex("ct", &p.ct)?;
                    if p.pt.len() != p.ct.len() {
                        return Err(invalid("pairs", "pt and ct widths differ"));
                    }
                }
            }
            Message::Progress {
                job_id,
                current_key,
                ..
            } => {
                check_id("job_id", job_id)?;
                check_hex("current_key", current_key)?;
            }
            Message::Found { job_id, key } => {
                check_id("job_id", job_id)?;
                check_hex("key", key)?;
            }
            Message::Exhausted { job_id } => check_id("job_id", job_id)?,
            Message::Stop { .. } => {}
            Message::Error { code, .. } => check_id("code", code)?,
        }
        Ok(())
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ProtocolError {
    ProtocolError::InvalidField {
        field,
        reason: reason.into(),
    }
}

fn check_id(field: &'static str, value: &str) -> Result<()> {
    if value.is_empty() || value.len() > MAX_ID_BYTES {
        return Err(invalid(field, format!("length must be 1..={MAX_ID_BYTES}")));
    }
    if value.chars().any(char::is_control) {
        return Err(invalid(field, "contains control characters"));
    }
    Ok(())
}

fn check_hex(field: &'static str, value: &str) -> Result<()> {
    if value.is_empty() || value.len() > hex_digits(MAX_KEY_BITS) {
        return Err(invalid(field, "bad hex length"));
    }
    if !value.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
        return Err(invalid(field, "not lowercase hex"));
    }
    Ok(())
}

/// Serializes one message as an LF-terminated line.
pub fn encode(message: &Message) -> Vec<u8> {
    let mut line = serde_json::to_vec(message).expect("messages always serialize");
    line.push(b'\n');
    line
}

/// Parses and validates one line. The trailing LF is optional.
pub fn decode(line: &[u8]) -> Result<Message> {
    let body = line.strip_suffix(b"\n").unwrap_or(line);
    let body = body.strip_suffix(b"\r").unwrap_or(body);
    if body.contains(&b'\n') {
        return Err(ProtocolError::Malformed("embedded line feed".into()));
    }
    let text = std::str::from_utf8(body)
        .map_err(|_| ProtocolError::Malformed("line is not UTF-8".into()))?;
    let message: Message =
        serde_json::from_str(text).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    message.validate()?;
    Ok(message)
}

/// Reads LF-delimited messages from a stream, never consuming past the current
/// line's terminator.
pub struct MessageReader<R> {
    inner: BufReader<R>,
    buf: Vec<u8>,
}

impl<R: Read> MessageReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner: BufReader::new(inner),
            buf: Vec::with_capacity(256),
        }
    }

    /// `Ok(None)` on clean end of stream. A decode failure leaves the reader
    /// positioned at the next line.
    pub fn next_message(&mut self) -> Result<Option<Message>> {
        self.buf.clear();
        let limit = MAX_LINE_BYTES as u64;
        let n = (&mut self.inner).take(limit).read_until(b'\n', &mut self.buf)?;
        if n == 0 {
            return Ok(None);
        }
        if self.buf.last() != Some(&b'\n') {
            if n as u64 == limit {
                // drain the rest of the oversized line
                loop {
                    let chunk = self.inner.fill_buf()?;
                    if chunk.is_empty() {
                        break;
                    }
                    match chunk.iter().position(|&b| b == b'\n') {
                        Some(i) => {
                            self.inner.consume(i + 1);
                            break;
                        }
                        None => {
                            let len = chunk.len();
                            self.inner.consume(len);
                        }
                    }
                }
                return Err(ProtocolError::LineTooLong);
            }
            return Err(ProtocolError::Malformed("truncated line at end of stream".into()));
        }
        decode(&self.buf).map(Some)
    }
}

/// Writes one message and flushes.
pub fn write_message<W: Write + ?Sized>(out: &mut W, message: &Message) -> io::Result<()> {
    out.write_all(&encode(message))?;
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(m: &Message) -> String {
        String::from_utf8(encode(m)).unwrap()
    }

    #[test]
    fn encodes_documented_forms() {
        assert_eq!(line(&Message::hello("a1", None)), "{\"type\":\"hello\",\"agent_id\":\"a1\"}\n");
        assert_eq!(
            line(&Message::stop(StopReason::Found)),
            "{\"type\":\"stop\",\"reason\":\"found\"}\n"
        );
        let range = KeyRange::from_hex("4", "7", 4).unwrap();
        let pair = KnownPair::parse("1234:1232", 16).unwrap();
        assert_eq!(
            line(&Message::assign("j1", "xor16-r4", &range, &[pair])),
            "{\"type\":\"assign\",\"job_id\":\"j1\",\"cipher_id\":\"xor16-r4\",\"key_bits\":4,\
             \"first_key\":\"4\",\"last_key\":\"7\",\"pairs\":[{\"pt\":\"1234\",\"ct\":\"1232\"}]}\n"
        );
    }

    #[test]
    fn decodes_and_rejects() {
        assert_eq!(
            decode(b"{\"type\":\"exhausted\",\"job_id\":\"j1\"}\n").unwrap(),
            Message::exhausted("j1")
        );
        let wide = b"{\"type\":\"assign\",\"job_id\":\"j\",\"cipher_id\":\"xor16-r4\",\"key_bits\":4,\
                     \"first_key\":\"ffff\",\"last_key\":\"f\",\"pairs\":[]}";
        assert!(matches!(decode(wide), Err(ProtocolError::InvalidField { field: "first_key", .. })));
        assert!(matches!(decode(b"{\"type\":\"nope\"}"), Err(ProtocolError::Malformed(_))));
        assert!(matches!(decode(b"not json"), Err(ProtocolError::Malformed(_))));
        assert!(matches!(decode(&[0xff, 0xfe]), Err(ProtocolError::Malformed(_))));
        assert!(decode(b"{\"type\":\"found\",\"job_id\":\"j\",\"key\":\"ABC\"}").is_err());
        assert!(decode(b"{\"type\":\"stop\",\"reason\":\"bored\"}").is_err());
        assert!(decode(b"{\"type\":\"hello\",\"agent_id\":\"\"}").is_err());
        // extra fields are tolerated
        assert_eq!(
            decode(b"{\"type\":\"exhausted\",\"job_id\":\"j1\",\"extra\":[1,2]}").unwrap(),
            Message::exhausted("j1")
        );
    }

    #[test]
    fn reader_handles_pipelined_and_oversized_lines() {
        let mut stream = Vec::new();
        stream.extend(encode(&Message::hello("a", Some(10.5))));
        stream.extend(vec![b'x'; MAX_LINE_BYTES + 10]);
        stream.push(b'\n');
        stream.extend(b"garbage\n");
        stream.extend(encode(&Message::exhausted("j0")));
        stream.extend(b"{\"type\":\"stop\"");
        let mut r = MessageReader::new(stream.as_slice());
        assert_eq!(r.next_message().unwrap(), Some(Message::hello("a", Some(10.5))));
        assert!(matches!(r.next_message(), Err(ProtocolError::LineTooLong)));
        assert!(matches!(r.next_message(), Err(ProtocolError::Malformed(_))));
        assert_eq!(r.next_message().unwrap(), Some(Message::exhausted("j0")));
        assert!(matches!(r.next_message(), Err(ProtocolError::Malformed(_))));
        assert_eq!(r.next_message().unwrap(), None);
    }
}
