//! Flat `key = value` configuration files. One pair per line, `#` starts
//! a comment, later assignments win. Typed lookups report the offending
//! key and value.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config line {line_no}: {reason}: {line:?}")]
    Parse {
        line_no: usize,
        line: String,
        reason: &'static str,
    },
    #[error("missing config key {0:?}")]
    MissingKey(String),
    #[error("config key {key:?} has invalid value {value:?}: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
}

/// Parsed key/value pairs in file order.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
    index: HashMap<String, usize>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut kv = KeyValues::default();
        for (line_no, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Parse {
                line_no: line_no + 1,
                line: raw.to_string(),
                reason: "expected key = value",
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Parse {
                    line_no: line_no + 1,
                    line: raw.to_string(),
                    reason: "empty key",
                });
            }
            kv.set(key, value.trim());
        }
        Ok(kv)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        match self.index.get(key) {
            Some(&i) => self.entries[i].1 = value.to_string(),
            None => {
                self.index.insert(key.to_string(), self.entries.len());
                self.entries.push((key.to_string(), value.to_string()));
            }
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.index.get(key).map(|&i| self.entries[i].1.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, ConfigError> {
        self.get(key)
            .ok_or_else(|| ConfigError::MissingKey(key.to_string()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, kind: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| ConfigError::BadValue {
                key: key.to_string(),
                value: raw.to_string(),
                reason: format!("expected {kind}: {e}"),
            }),
        }
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>, ConfigError> {
        self.parsed(key, "an unsigned integer")
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>, ConfigError> {
        self.parsed(key, "an unsigned integer")
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        self.parsed(key, "a number")
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some("true" | "1" | "yes") => Ok(Some(true)),
            Some("false" | "0" | "no") => Ok(Some(false)),
            Some(raw) => Err(ConfigError::BadValue {
                key: key.to_string(),
                value: raw.to_string(),
                reason: "expected true or false".into(),
            }),
        }
    }

    /// Error on any key outside the allowed set. Catches typos before a
    /// silently ignored knob wastes a training run.
    pub fn check_known(&self, allowed: &[&str]) -> Result<(), ConfigError> {
        for key in self.keys() {
            if !allowed.contains(&key) {
                return Err(ConfigError::UnknownKey(key.to_string()));
            }
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            writeln!(out, "{k} = {v}").expect("string write");
        }
        out
    }
}
