//! Plain-text `key = value` files with `[section]` headers.
//!
//! This is the on-disk format shared by DAC parameter tables, calibration
//! records, and the CLI config file. Lines starting with `#` and blank
//! lines are ignored. Keys appearing before any section header land in the
//! unnamed section `""`. Duplicate keys within a section are rejected so
//! that a typo cannot silently shadow an earlier value.

use std::collections::BTreeMap;
use std::fmt;

pub type Sections = BTreeMap<String, BTreeMap<String, String>>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KvError {
    Syntax { line: usize, msg: String },
    DuplicateKey { line: usize, section: String, key: String },
}

impl fmt::Display for KvError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KvError::Syntax { line, msg } => write!(f, "line {line}: {msg}"),
            KvError::DuplicateKey { line, section, key } => {
                write!(f, "line {line}: duplicate key `{key}` in section [{section}]")
            }
        }
    }
}

impl std::error::Error for KvError {}

/// Parses the full text of a key=value file.
pub fn parse(text: &str) -> Result<Sections, KvError> {
    let mut sections: Sections = BTreeMap::new();
    let mut current = String::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| KvError::Syntax {
                line: line_no,
                msg: "unterminated section header".into(),
            })?;
            let name = name.trim();
            if name.is_empty() {
                return Err(KvError::Syntax { line: line_no, msg: "empty section name".into() });
            }
            current = name.to_string();
            sections.entry(current.clone()).or_default();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| KvError::Syntax {
            line: line_no,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(KvError::Syntax { line: line_no, msg: "empty key".into() });
        }
        let section = sections.entry(current.clone()).or_default();
        if section.contains_key(key) {
            return Err(KvError::DuplicateKey {
                line: line_no,
                section: current.clone(),
                key: key.to_string(),
            });
        }
        section.insert(key.to_string(), value.to_string());
    }
    Ok(sections)
}

/// Renders sections back to text in sorted, reparseable form.
pub fn render(sections: &Sections) -> String {
    let mut out = String::new();
    if let Some(global) = sections.get("") {
        for (k, v) in global {
            out.push_str(&format!("{k} = {v}\n"));
        }
    }
    for (name, entries) in sections {
        if name.is_empty() {
            continue;
        }
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(&format!("[{name}]\n"));
        for (k, v) in entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
    }
    out
}

/// Fetches a typed value out of a parsed section.
pub fn get_f64(section: &BTreeMap<String, String>, key: &str) -> Result<Option<f64>, KvError> {
    match section.get(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse::<f64>()
            .map(Some)
            .map_err(|_| KvError::Syntax { line: 0, msg: format!("key `{key}`: `{raw}` is not a number") }),
    }
}

pub fn get_u32(section: &BTreeMap<String, String>, key: &str) -> Result<Option<u32>, KvError> {
    match section.get(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse::<u32>()
            .map(Some)
            .map_err(|_| KvError::Syntax { line: 0, msg: format!("key `{key}`: `{raw}` is not an unsigned integer") }),
    }
}

pub fn get_u64(section: &BTreeMap<String, String>, key: &str) -> Result<Option<u64>, KvError> {
    match section.get(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse::<u64>()
            .map(Some)
            .map_err(|_| KvError::Syntax { line: 0, msg: format!("key `{key}`: `{raw}` is not an unsigned integer") }),
    }
}
