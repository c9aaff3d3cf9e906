//! Flat `key = value` configuration files.
//!
//! One entry per line, `#` starts a comment, blank lines are ignored. Keys are
//! dotted identifiers (`model.n_queries`). Every typed configuration in the
//! crate implements [`KvConfig`], which rejects unknown keys and can write
//! itself back out as a resolved snapshot.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::{Error, Result};

/// A configuration that can be populated from, and serialized to, flat entries.
pub trait KvConfig {
    /// Applies one entry. Unknown keys and unparsable values are errors.
    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    /// All keys with their current values, in a stable order.
    fn entries(&self) -> Vec<(String, String)>;

    fn keys(&self) -> Vec<String> {
        self.entries().into_iter().map(|(k, _)| k).collect()
    }

    fn to_kv_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(&k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Applies every entry of a parsed file, attributing failures to their line.
    fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for entry in parse_kv(text, origin)? {
            self.set(&entry.key, &entry.value).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: entry.line,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, path)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvEntry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse_kv(text: &str, origin: &Path) -> Result<Vec<KvEntry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: format!("expected `key = value`, found `{line}`"),
            });
        };
        let key = k.trim();
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: format!("invalid key `{key}`"),
            });
        }
        out.push(KvEntry {
            key: key.to_string(),
            value: v.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

pub fn parse_value<T>(key: &str, value: &str) -> Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

/// Comma-separated list, e.g. `32,64`.
pub fn parse_list<T>(key: &str, value: &str) -> Result<Vec<T>>
where
    T: FromStr,
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

pub fn format_list<T: Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Formats a float so that parsing it back yields the identical bits.
pub fn format_f64(x: f64) -> String {
    format!("{x:?}")
}

pub fn unknown_key(key: &str, cfg: &dyn KvConfig) -> Error {
    Error::Config(format!(
        "unknown key `{key}`; valid keys: {}",
        cfg.keys().join(", ")
    ))
}
