//! Shared pieces of the bundle and state-blob text formats.

use sha2::{Digest, Sha256};

use super::RuntimeError;

/// Hard cap on bundle and blob sizes.
pub const MAX_BYTES: usize = 256 << 20;

pub fn sha256_hex(data: &[u8]) -> String {
    let digest = Sha256::digest(data);
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// `key v0 v1 ...` with shortest round-trip formatting.
pub fn float_line(key: &str, values: &[f64]) -> String {
    let mut s = String::from(key);
    for v in values {
        s.push(' ');
        s.push_str(&format!("{v:?}"));
    }
    s.push('\n');
    s
}

pub fn corrupt(msg: impl Into<String>) -> RuntimeError {
    RuntimeError::Corrupt(msg.into())
}

pub fn parse_floats(rest: &str) -> Result<Vec<f64>, RuntimeError> {
    rest.split_ascii_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| corrupt(format!("bad number `{t}`")))
        })
        .collect()
}

/// Splits off the `@end <sha256>` trailer and checks the digest.
pub fn check_trailer(data: &[u8]) -> Result<&str, RuntimeError> {
    if data.len() > MAX_BYTES {
        return Err(corrupt("file too large"));
    }
    let text = std::str::from_utf8(data).map_err(|_| corrupt("not UTF-8"))?;
    let body_end = text
        .rfind("@end ")
        .ok_or_else(|| corrupt("missing @end trailer"))?;
    if body_end > 0 && !text[..body_end].ends_with('\n') {
        return Err(corrupt("@end must start a line"));
    }
    let trailer = text[body_end + 5..].trim_end_matches('\n');
    if trailer.len() != 64 || text[body_end + 5..].len() > 65 {
        return Err(corrupt("malformed @end trailer"));
    }
    let body = &text[..body_end];
    if sha256_hex(body.as_bytes()) != trailer {
        return Err(corrupt("checksum mismatch"));
    }
    Ok(body)
}

/// Line cursor over a section body.
pub struct Lines<'a> {
    rest: &'a str,
}

impl<'a> Lines<'a> {
    pub fn new(text: &'a str) -> Self {
        Lines { rest: text }
    }

    pub fn is_done(&self) -> bool {
        self.rest.is_empty()
    }

    pub fn next_line(&mut self) -> Result<&'a str, RuntimeError> {
        if self.rest.is_empty() {
            return Err(corrupt("unexpected end of data"));
        }
        let (line, rest) = match self.rest.find('\n') {
            Some(i) => (&self.rest[..i], &self.rest[i + 1..]),
            None => return Err(corrupt("unterminated line")),
        };
        self.rest = rest;
        Ok(line)
    }

    /// Next line, which must start with `key`; returns the remainder.
    pub fn expect(&mut self, key: &str) -> Result<&'a str, RuntimeError> {
        let line = self.next_line()?;
        match line.strip_prefix(key) {
            Some("") => Ok(""),
            Some(rest) if rest.starts_with(' ') => Ok(&rest[1..]),
            _ => Err(corrupt(format!(
                "expected `{key}`, found `{}`",
                truncate(line)
            ))),
        }
    }

    /// Takes exactly `n` raw bytes.
    pub fn take(&mut self, n: usize) -> Result<&'a str, RuntimeError> {
        if n > self.rest.len() || !self.rest.is_char_boundary(n) {
            return Err(corrupt("section length exceeds data"));
        }
        let (a, b) = self.rest.split_at(n);
        self.rest = b;
        Ok(a)
    }
}

pub fn truncate(s: &str) -> &str {
    match s.char_indices().nth(40) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

pub fn parse_usize(s: &str, what: &str) -> Result<usize, RuntimeError> {
    s.trim()
        .parse()
        .map_err(|_| corrupt(format!("bad {what} `{}`", truncate(s))))
}
