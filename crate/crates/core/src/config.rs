//! Flat `key = value` run configs with `[section]` headers.
//!
//! ```text
//! # comment
//! [run]
//! seed = 3
//!
//! [inject]
//! n = 4096
//! layers = all
//! ```
//!
//! Keys before the first header belong to the `run` section. Every resolved
//! config renders back to a canonical manifest whose SHA-256 is the config
//! hash embedded in JSON artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_SECTION: &str = "run";

#[derive(Debug, Clone, PartialEq, Eq)]
struct Entry {
    value: String,
    /// Source line, 0 for values set programmatically.
    line: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Config {
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::new();
        let mut section = DEFAULT_SECTION.to_string();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') || s.starts_with(';') {
                continue;
            }
            if let Some(rest) = s.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| Error::Config {
                    line,
                    message: format!("unterminated section header `{s}`"),
                })?;
                let name = name.trim();
                if !valid_name(name) {
                    return Err(Error::Config {
                        line,
                        message: format!("invalid section name `{name}`"),
                    });
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = s.split_once('=').ok_or_else(|| Error::Config {
                line,
                message: format!("expected `key = value`, got `{s}`"),
            })?;
            let key = key.trim();
            if !valid_name(key) {
                return Err(Error::Config {
                    line,
                    message: format!("invalid key `{key}`"),
                });
            }
            let entries = cfg.sections.entry(section.clone()).or_default();
            if let Some(prev) = entries.get(key) {
                return Err(Error::Config {
                    line,
                    message: format!("duplicate key `{section}.{key}` (first set on line {})", prev.line),
                });
            }
            entries.insert(
                key.to_string(),
                Entry {
                    value: value.trim().to_string(),
                    line,
                },
            );
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets or overrides a value.
    pub fn set(&mut self, section: &str, key: &str, value: impl ToString) {
        self.sections.entry(section.to_string()).or_default().insert(
            key.to_string(),
            Entry {
                value: value.to_string(),
                line: 0,
            },
        );
    }

    /// Sets a value only when absent.
    pub fn set_default(&mut self, section: &str, key: &str, value: impl ToString) {
        if self.get(section, key).is_none() {
            self.set(section, key, value);
        }
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(|e| e.value.as_str())
    }

    fn line_of(&self, section: &str, key: &str) -> usize {
        self.sections
            .get(section)
            .and_then(|s| s.get(key))
            .map_or(0, |e| e.line)
    }

    /// Value required to be present.
    pub fn require(&self, section: &str, key: &str) -> Result<&str> {
        self.get(section, key).ok_or_else(|| Error::Config {
            line: 0,
            message: format!("missing required key `{section}.{key}`"),
        })
    }

    pub fn parse_opt<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(section, key)
            .map(|v| {
                v.parse::<T>().map_err(|e| Error::Config {
                    line: self.line_of(section, key),
                    message: format!("`{section}.{key} = {v}`: {e}"),
                })
            })
            .transpose()
    }

    pub fn parse_required<T: FromStr>(&self, section: &str, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.require(section, key)?;
        Ok(self.parse_opt(section, key)?.expect("present"))
    }

    pub fn parse_or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parse_opt(section, key)?.unwrap_or(default))
    }

    /// Errors on any section or key outside `allowed`.
    pub fn ensure_known(&self, allowed: &[(&str, &[&str])]) -> Result<()> {
        for (section, entries) in &self.sections {
            let keys = allowed
                .iter()
                .find(|(s, _)| s == section)
                .map(|(_, k)| *k);
            for (key, entry) in entries {
                if !keys.is_some_and(|k| k.contains(&key.as_str())) {
                    return Err(Error::Config {
                        line: entry.line,
                        message: format!("unknown key `{section}.{key}`"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Canonical text: sections and keys sorted, one `key = value` per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (section, entries) in &self.sections {
            if entries.is_empty() {
                continue;
            }
            if !out.is_empty() {
                out.push('\n');
            }
            let _ = writeln!(out, "[{section}]");
            for (k, e) in entries {
                let _ = writeln!(out, "{k} = {}", e.value);
            }
        }
        out
    }

    /// Hex SHA-256 of [`Config::render`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.render().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
