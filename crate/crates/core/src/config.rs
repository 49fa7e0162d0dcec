//! Plain `key: value` configuration text.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Values stay strings until a typed getter pulls them out, so one parsed
//! file can feed several consumers with different key sets.

use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Parsed configuration lines.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parse configuration text; malformed lines are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once(':').ok_or_else(|| {
                Error::parse(format!("line {}: expected `key: value`, got {raw:?}", idx + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::parse(format!("line {}: bad key {key:?}", idx + 1)));
            }
            if value.is_empty() {
                return Err(Error::parse(format!("line {}: empty value for {key:?}", idx + 1)));
            }
            map.insert(key.to_string(), value.to_string());
        }
        Ok(KeyValues { map })
    }

    /// Store or override one setting.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    fn typed<F: std::str::FromStr>(&self, key: &str, kind: &str) -> Result<Option<F>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(text) => text.parse().map(Some).map_err(|_| {
                Error::parse(format!("key {key:?}: expected {kind}, got {text:?}"))
            }),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.typed::<usize>(key, "a non-negative integer")?.unwrap_or(default))
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        Ok(self.typed::<u64>(key, "a non-negative integer")?.unwrap_or(default))
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        let v = self.typed::<f64>(key, "a number")?.unwrap_or(default);
        if !v.is_finite() {
            return Err(Error::parse(format!("key {key:?}: value must be finite")));
        }
        Ok(v)
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.map.get(key).map(String::as_str) {
            None => Ok(default),
            Some("true") | Some("yes") | Some("on") => Ok(true),
            Some("false") | Some("no") | Some("off") => Ok(false),
            Some(text) => Err(Error::parse(format!("key {key:?}: expected a flag, got {text:?}"))),
        }
    }
}
