//! Architecture-configuration strings and the `key = value` config file
//! format.
//!
//! The block-kind grammar describes the 16 convolution kinds of the edge
//! network:
//!
//! ```text
//! TOKEN  := C | A | R | V
//! GROUP  := '[' TOKEN+ ']' 'x' INT | TOKEN
//! CONFIG := GROUP ('-' GROUP)*
//! ```
//!
//! `"[CARV]x4"` expands to C,A,R,V repeated four times; `"C-[V]x15"` to a C
//! followed by fifteen V's. The expansion must cover exactly 16 blocks.
//! [`render_blocks`] emits a canonical string: a whole-list repeat when the
//! sequence is periodic, otherwise run-length groups — so
//! `parse(render(kinds)) == kinds` and `render(parse(s))` is a normal form.

use crate::error::{Error, Result};
use crate::pdc::PdcKind;

pub const EDGE_BLOCKS: usize = 16;

fn config_err(pos: usize, msg: impl Into<String>) -> Error {
    Error::Config {
        pos,
        msg: msg.into(),
    }
}

/// Parse an architecture string into exactly 16 block kinds.
pub fn parse_blocks(s: &str) -> Result<Vec<PdcKind>> {
    let b = s.as_bytes();
    let mut kinds = Vec::with_capacity(EDGE_BLOCKS);
    let mut i = 0;
    if b.is_empty() {
        return Err(config_err(0, "empty architecture string"));
    }
    loop {
        // One GROUP.
        if i >= b.len() {
            return Err(config_err(i, "expected a group after '-'"));
        }
        if b[i] == b'[' {
            let start = i;
            i += 1;
            let mut pattern = Vec::new();
            while i < b.len() && b[i] != b']' {
                pattern.push(token_at(b, i)?);
                i += 1;
            }
            if i >= b.len() {
                return Err(config_err(start, "unclosed '['"));
            }
            if pattern.is_empty() {
                return Err(config_err(start, "empty group '[]'"));
            }
            i += 1; // ']'
            if i >= b.len() || b[i] != b'x' {
                return Err(config_err(i, "expected 'x' after ']'"));
            }
            i += 1;
            let dstart = i;
            while i < b.len() && b[i].is_ascii_digit() {
                i += 1;
            }
            if i == dstart {
                return Err(config_err(dstart, "expected repeat count after 'x'"));
            }
            let n: usize = s[dstart..i]
                .parse()
                .map_err(|_| config_err(dstart, "repeat count out of range"))?;
            if n == 0 {
                return Err(config_err(dstart, "repeat count must be >= 1"));
            }
            for _ in 0..n {
                kinds.extend_from_slice(&pattern);
            }
        } else {
            kinds.push(token_at(b, i)?);
            i += 1;
        }
        if i == b.len() {
            break;
        }
        if b[i] != b'-' {
            return Err(config_err(i, format!("unexpected character '{}'", b[i] as char)));
        }
        i += 1;
    }
    if kinds.len() != EDGE_BLOCKS {
        return Err(config_err(
            0,
            format!("architecture expands to {} blocks, need {}", kinds.len(), EDGE_BLOCKS),
        ));
    }
    Ok(kinds)
}

fn token_at(b: &[u8], i: usize) -> Result<PdcKind> {
    PdcKind::from_token(b[i] as char)
        .ok_or_else(|| config_err(i, format!("unknown block kind '{}'", b[i] as char)))
}

/// Canonical rendering of a 16-kind list.
///
/// If the list is periodic, the shortest period wins (`[CARV]x4`, `[V]x16`);
/// otherwise runs of equal kinds become groups (`C-[V]x15`).
pub fn render_blocks(kinds: &[PdcKind]) -> String {
    let n = kinds.len();
    for p in 1..n {
        if n % p == 0 && (p..n).all(|i| kinds[i] == kinds[i - p]) {
            let pattern: String = kinds[..p].iter().map(|k| k.token()).collect();
            return format!("[{}]x{}", pattern, n / p);
        }
    }
    let mut parts = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && kinds[j] == kinds[i] {
            j += 1;
        }
        let run = j - i;
        if run >= 2 {
            parts.push(format!("[{}]x{}", kinds[i].token(), run));
        } else {
            parts.push(kinds[i].token().to_string());
        }
        i = j;
    }
    parts.join("-")
}

/// One `key = value` assignment from a config file, with its line number.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KvEntry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Parse line-oriented `key = value` UTF-8 text. Blank lines and `#`
/// comments are skipped; duplicate keys keep the last assignment (callers
/// that care can inspect the full list).
pub fn parse_kv(text: &str) -> Result<Vec<KvEntry>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let eq = line.find('=').ok_or_else(|| {
            config_err(lineno + 1, format!("line {}: expected 'key = value'", lineno + 1))
        })?;
        let key = line[..eq].trim();
        let value = line[eq + 1..].trim();
        if key.is_empty() {
            return Err(config_err(lineno + 1, format!("line {}: empty key", lineno + 1)));
        }
        out.push(KvEntry {
            line: lineno + 1,
            key: key.to_string(),
            value: value.to_string(),
        });
    }
    Ok(out)
}

/// Render assignments back to canonical `key = value` lines.
pub fn render_kv(entries: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in entries {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(v);
        s.push('\n');
    }
    s
}

/// Fold a parsed entry list into last-wins lookups.
pub fn kv_get<'a>(entries: &'a [KvEntry], key: &str) -> Option<&'a str> {
    entries
        .iter()
        .rev()
        .find(|e| e.key == key)
        .map(|e| e.value.as_str())
}
