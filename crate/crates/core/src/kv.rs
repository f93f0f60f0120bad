//! Line-oriented `key = value` text, the format used for run configs,
//! metric reports and per-epoch training logs.
//!
//! Blank lines and lines whose first non-space character is `#` are ignored.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct KvError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    /// 1-based source line.
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse(text: &str) -> Result<Vec<Entry>, KvError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(KvError { line: i + 1, message: format!("expected `key = value`, got {line:?}") });
        };
        let key = key.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(KvError { line: i + 1, message: format!("invalid key {key:?}") });
        }
        out.push(Entry { line: i + 1, key: key.to_string(), value: value.trim().to_string() });
    }
    Ok(out)
}

/// Splits entries into groups, starting a new group at every occurrence of
/// `leader`. Entries before the first leader form their own group.
pub fn groups<'a>(entries: &'a [Entry], leader: &str) -> Vec<&'a [Entry]> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, e) in entries.iter().enumerate() {
        if e.key == leader && i > start {
            out.push(&entries[start..i]);
            start = i;
        }
    }
    if start < entries.len() {
        out.push(&entries[start..]);
    }
    out
}

pub fn get<'a>(entries: &'a [Entry], key: &str) -> Option<&'a str> {
    entries.iter().find(|e| e.key == key).map(|e| e.value.as_str())
}
