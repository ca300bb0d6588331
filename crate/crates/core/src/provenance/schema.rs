//! Response-structure descriptors and a JSON scanner that tolerates hidden
//! bytes.
//!
//! The verifier sees a response body with some bytes redacted. It may accept
//! the proof only if every hidden byte sits inside the string value of a field
//! the schema declares redactable (IDs, tokens); content-bearing fields and
//! all JSON structure must be visible.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ProvenanceError, RevealRanges, SessionTranscript};

const MAX_DEPTH: usize = 32;
pub(crate) const HEADER_END: &[u8] = b"\r\n\r\n";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldRule {
    pub path: String,
    pub redactable: bool,
    /// Upper bound on the raw string length of a redacted value.
    #[serde(default)]
    pub max_len: Option<usize>,
}

/// Ordered description of a backend's response body. Leaf paths use dotted
/// keys and `[i]` for array elements, e.g. `message.content.parts[0]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseSchema {
    pub name: String,
    pub version: u32,
    pub server_name: String,
    /// Status line and headers may be hidden.
    pub redactable_head: bool,
    pub fields: Vec<FieldRule>,
    /// Leaf holding the chatbot's answer text.
    pub content_path: String,
}

impl ResponseSchema {
    pub fn rule(&self, path: &str) -> Option<&FieldRule> {
        self.fields.iter().find(|f| f.path == path)
    }

    /// Leaf paths must match the declared fields exactly and in order.
    pub fn check_leaves(&self, leaves: &[Leaf]) -> Result<(), ScanError> {
        let got: Vec<&str> = leaves.iter().map(|l| l.path.as_str()).collect();
        let want: Vec<&str> = self.fields.iter().map(|f| f.path.as_str()).collect();
        if got != want {
            return Err(ScanError::FieldSequence {
                expected: want.join(","),
                found: got.join(","),
            });
        }
        Ok(())
    }
}

/// A scalar value found in the body, with its raw byte span (including the
/// quotes for strings) relative to the body start.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Leaf {
    pub path: String,
    pub span: Range<usize>,
    pub is_string: bool,
    pub hidden: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScanError {
    #[error("hidden byte outside a string value at offset {0}")]
    HoleOutsideString(usize),
    #[error("hidden bytes inside non-redactable field {0}")]
    HoleInProtectedField(String),
    #[error("hidden bytes inside undeclared field {0}")]
    UnknownField(String),
    #[error("redacted value of {0} longer than allowed")]
    FieldTooLong(String),
    #[error("ambiguous escape next to hidden bytes at offset {0}")]
    AmbiguousEscape(usize),
    #[error("unexpected byte at offset {0}")]
    Unexpected(usize),
    #[error("body truncated")]
    Truncated,
    #[error("nesting too deep")]
    TooDeep,
    #[error("data after the JSON value at offset {0}")]
    Trailing(usize),
    #[error("field sequence mismatch: expected [{expected}], found [{found}]")]
    FieldSequence { expected: String, found: String },
}

struct Scanner<'a> {
    bytes: &'a [Option<u8>],
    pos: usize,
    schema: Option<&'a ResponseSchema>,
    leaves: Vec<Leaf>,
}

impl Scanner<'_> {
    fn byte(&self) -> Result<u8, ScanError> {
        match self.bytes.get(self.pos) {
            None => Err(ScanError::Truncated),
            Some(None) => Err(ScanError::HoleOutsideString(self.pos)),
            Some(Some(b)) => Ok(*b),
        }
    }

    fn skip_ws(&mut self) {
        while let Some(Some(b' ' | b'\n' | b'\r' | b'\t')) = self.bytes.get(self.pos) {
            self.pos += 1;
        }
    }

    fn expect(&mut self, want: u8) -> Result<(), ScanError> {
        if self.byte()? != want {
            return Err(ScanError::Unexpected(self.pos));
        }
        self.pos += 1;
        Ok(())
    }

    fn value(&mut self, path: &str, depth: usize) -> Result<(), ScanError> {
        if depth > MAX_DEPTH {
            return Err(ScanError::TooDeep);
        }
        match self.byte()? {
            b'{' => self.object(path, depth),
            b'[' => self.array(path, depth),
            b'"' => self.string(path),
            b't' | b'f' | b'n' | b'-' | b'0'..=b'9' => self.literal(path),
            _ => Err(ScanError::Unexpected(self.pos)),
        }
    }

    fn object(&mut self, path: &str, depth: usize) -> Result<(), ScanError> {
        self.expect(b'{')?;
        self.skip_ws();
        if self.byte()? == b'}' {
            self.pos += 1;
            return Ok(());
        }
        loop {
            self.skip_ws();
            let key = self.key()?;
            self.skip_ws();
            self.expect(b':')?;
            self.skip_ws();
            let child = if path.is_empty() { key } else { format!("{path}.{key}") };
            self.value(&child, depth + 1)?;
            self.skip_ws();
            match self.byte()? {
                b',' => self.pos += 1,
                b'}' => {
                    self.pos += 1;
                    return Ok(());
                }
                _ => return Err(ScanError::Unexpected(self.pos)),
            }
        }
    }

    fn array(&mut self, path: &str, depth: usize) -> Result<(), ScanError> {
        self.expect(b'[')?;
        self.skip_ws();
        if self.byte()? == b']' {
            self.pos += 1;
            return Ok(());
        }
        let mut i = 0;
        loop {
            self.skip_ws();
            self.value(&format!("{path}[{i}]"), depth + 1)?;
            i += 1;
            self.skip_ws();
            match self.byte()? {
                b',' => self.pos += 1,
                b']' => {
                    self.pos += 1;
                    return Ok(());
                }
                _ => return Err(ScanError::Unexpected(self.pos)),
            }
        }
    }

    fn key(&mut self) -> Result<String, ScanError> {
        let start = self.pos;
        let (end, hidden) = self.string_extent()?;
        if hidden {
            return Err(ScanError::HoleOutsideString(start));
        }
        let raw: Vec<u8> = self.bytes[start..end].iter().map(|b| b.unwrap()).collect();
        serde_json::from_slice::<String>(&raw).map_err(|_| ScanError::Unexpected(start))
    }

    /// Walks a string token; returns its end offset and whether it had holes.
    fn string_extent(&mut self) -> Result<(usize, bool), ScanError> {
        self.expect(b'"')?;
        let mut hidden = false;
        loop {
            match self.bytes.get(self.pos) {
                None => return Err(ScanError::Truncated),
                Some(None) => {
                    hidden = true;
                    self.pos += 1;
                }
                Some(Some(b'\\')) => {
                    if self.pos > 0 && self.bytes[self.pos - 1].is_none() {
                        return Err(ScanError::AmbiguousEscape(self.pos));
                    }
                    self.pos += 2;
                }
                Some(Some(b'"')) => {
                    if self.bytes[self.pos - 1].is_none() {
                        return Err(ScanError::AmbiguousEscape(self.pos));
                    }
                    self.pos += 1;
                    return Ok((self.pos, hidden));
                }
                Some(Some(_)) => self.pos += 1,
            }
        }
    }

    fn string(&mut self, path: &str) -> Result<(), ScanError> {
        let start = self.pos;
        let (end, hidden) = self.string_extent()?;
        if hidden {
            let rule = self
                .schema
                .and_then(|s| s.rule(path))
                .ok_or_else(|| ScanError::UnknownField(path.to_string()))?;
            if !rule.redactable {
                return Err(ScanError::HoleInProtectedField(path.to_string()));
            }
            if rule.max_len.is_some_and(|m| end - start - 2 > m) {
                return Err(ScanError::FieldTooLong(path.to_string()));
            }
        } else {
            let raw: Vec<u8> = self.bytes[start..end].iter().map(|b| b.unwrap()).collect();
            serde_json::from_slice::<String>(&raw).map_err(|_| ScanError::Unexpected(start))?;
        }
        self.leaves.push(Leaf {
            path: path.to_string(),
            span: start..end,
            is_string: true,
            hidden,
        });
        Ok(())
    }

    fn literal(&mut self, path: &str) -> Result<(), ScanError> {
        let start = self.pos;
        while let Some(Some(b'a'..=b'z' | b'0'..=b'9' | b'-' | b'+' | b'.' | b'E')) = self.bytes.get(self.pos) {
            self.pos += 1;
        }
        let raw: Vec<u8> = self.bytes[start..self.pos].iter().map(|b| b.unwrap()).collect();
        serde_json::from_slice::<serde_json::Value>(&raw).map_err(|_| ScanError::Unexpected(start))?;
        self.leaves.push(Leaf {
            path: path.to_string(),
            span: start..self.pos,
            is_string: false,
            hidden: false,
        });
        Ok(())
    }
}

/// Scans one JSON document that must span the whole input.
pub fn scan_body(body: &[Option<u8>], schema: Option<&ResponseSchema>) -> Result<Vec<Leaf>, ScanError> {
    let mut s = Scanner {
        bytes: body,
        pos: 0,
        schema,
        leaves: Vec::new(),
    };
    s.skip_ws();
    s.value("", 0)?;
    s.skip_ws();
    if s.pos != body.len() {
        return Err(ScanError::Trailing(s.pos));
    }
    Ok(s.leaves)
}

pub(crate) fn find_header_end(bytes: &[u8]) -> Option<usize> {
    bytes.windows(HEADER_END.len()).position(|w| w == HEADER_END)
}

/// The reveal plan an honest prover uses: in the request only the head
/// terminator and the JSON-encoded query; in the response everything except
/// its head (when redactable) and the interiors of redactable string fields.
pub fn plan_reveal(t: &SessionTranscript, schema: &ResponseSchema, query: &str) -> Result<RevealRanges, ProvenanceError> {
    let req_sep = find_header_end(&t.request)
        .ok_or_else(|| ProvenanceError::Malformed("request has no header terminator".into()))?;
    let needle = serde_json::to_string(query).expect("string serializes");
    let body_start = req_sep + HEADER_END.len();
    let at = t.request[body_start..]
        .windows(needle.len())
        .position(|w| w == needle.as_bytes())
        .ok_or_else(|| ProvenanceError::Malformed("query not in request body".into()))?;
    let request = vec![req_sep..body_start, body_start + at..body_start + at + needle.len()];
    let resp_sep = find_header_end(&t.response)
        .ok_or_else(|| ProvenanceError::Malformed("response has no header terminator".into()))?;
    let body_start = resp_sep + HEADER_END.len();
    let body: Vec<Option<u8>> = t.response[body_start..].iter().map(|b| Some(*b)).collect();
    let leaves = scan_body(&body, Some(schema)).map_err(|e| ProvenanceError::Malformed(e.to_string()))?;

    let mut hidden: Vec<Range<usize>> = Vec::new();
    for leaf in &leaves {
        let redactable = schema.rule(&leaf.path).is_some_and(|r| r.redactable);
        // keep the quotes and the last interior byte visible
        if redactable && leaf.is_string && leaf.span.len() > 3 {
            hidden.push(body_start + leaf.span.start + 1..body_start + leaf.span.end - 2);
        }
    }
    let mut response = Vec::new();
    let mut cursor = if schema.redactable_head { resp_sep } else { 0 };
    for h in hidden {
        if h.start > cursor {
            response.push(cursor..h.start);
        }
        cursor = h.end;
    }
    response.push(cursor..t.response.len());
    Ok(RevealRanges { request, response })
}
