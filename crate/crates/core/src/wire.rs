//! Byte-level encodings shared by every message that crosses a trust boundary.
//!
//! Signed byte strings and binary blobs use length-prefixed concatenation
//! (big-endian `u32` length, then the bytes). Anything travelling inside JSON
//! is standard base64.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("invalid base64: {0}")]
    Base64(String),
    #[error("truncated input: wanted {wanted} bytes, {available} available")]
    Truncated { wanted: usize, available: usize },
    #[error("trailing bytes after message: {0}")]
    Trailing(usize),
    #[error("field {0} has invalid length {1}")]
    BadLength(&'static str, usize),
    #[error("invalid value for {0}")]
    BadValue(&'static str),
}

pub fn b64_encode(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

pub fn b64_decode(text: &str) -> Result<Vec<u8>, WireError> {
    STANDARD
        .decode(text.trim())
        .map_err(|e| WireError::Base64(e.to_string()))
}

/// Appends length-prefixed fields to a buffer.
#[derive(Debug, Default, Clone)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn field(&mut self, bytes: &[u8]) -> &mut Self {
        let len = u32::try_from(bytes.len()).expect("field longer than u32::MAX");
        self.buf.extend_from_slice(&len.to_be_bytes());
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn finish(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.buf)
    }
}

/// Cursor over a length-prefixed byte string.
#[derive(Debug, Clone)]
pub struct Reader<'a> {
    rest: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { rest: bytes }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.rest.len() < n {
            return Err(WireError::Truncated {
                wanted: n,
                available: self.rest.len(),
            });
        }
        let (head, tail) = self.rest.split_at(n);
        self.rest = tail;
        Ok(head)
    }

    pub fn field(&mut self) -> Result<&'a [u8], WireError> {
        let len = self.u32()? as usize;
        self.take(len)
    }

    pub fn fixed<const N: usize>(&mut self, name: &'static str) -> Result<[u8; N], WireError> {
        let f = self.field()?;
        f.try_into().map_err(|_| WireError::BadLength(name, f.len()))
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes(b.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        let b = self.take(8)?;
        Ok(u64::from_be_bytes(b.try_into().unwrap()))
    }

    pub fn finish(self) -> Result<(), WireError> {
        if self.rest.is_empty() {
            Ok(())
        } else {
            Err(WireError::Trailing(self.rest.len()))
        }
    }
}

/// Concatenates fields with length prefixes.
pub fn concat_fields(fields: &[&[u8]]) -> Vec<u8> {
    let mut w = Writer::new();
    for f in fields {
        w.field(f);
    }
    w.finish()
}

/// `#[serde(with = "veil::wire::b64")]` for byte vectors.
pub mod b64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::b64_encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        super::b64_decode(&text).map_err(serde::de::Error::custom)
    }
}

/// Fixed-size arrays as base64.
pub mod b64_array {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer, const N: usize>(bytes: &[u8; N], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::b64_encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(d: D) -> Result<[u8; N], D::Error> {
        let text = String::deserialize(d)?;
        let v = super::b64_decode(&text).map_err(serde::de::Error::custom)?;
        let len = v.len();
        v.try_into()
            .map_err(|_| serde::de::Error::custom(format!("expected {N} bytes, got {len}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reader_walks_fields() {
        let bytes = Writer::new().field(b"abc").u32(7).field(b"").u64(9).finish();
        let mut r = Reader::new(&bytes);
        assert_eq!(r.field().unwrap(), b"abc");
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.field().unwrap(), b"");
        assert_eq!(r.u64().unwrap(), 9);
        r.finish().unwrap();
    }

    #[test]
    fn truncated_and_trailing_rejected() {
        let bytes = concat_fields(&[b"hello"]);
        assert!(matches!(
            Reader::new(&bytes[..6]).field(),
            Err(WireError::Truncated { .. })
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        let mut r = Reader::new(&extra);
        r.field().unwrap();
        assert_eq!(r.finish(), Err(WireError::Trailing(1)));
    }

    #[test]
    fn length_prefix_is_big_endian() {
        assert_eq!(concat_fields(&[b"xy"]), vec![0, 0, 0, 2, b'x', b'y']);
    }
}
