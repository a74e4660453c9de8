//! Plain-text `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Later keys override
//! earlier ones.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::{CoreError, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CoreError::invalid(format!(
                    "line {}: expected `key = value`, got {line:?}",
                    n + 1
                )));
            };
            kv.set(key.trim(), value.trim());
        }
        Ok(kv)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get_raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Parsed value of `key`, or `default` when absent.
    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| CoreError::invalid(format!("{key}: cannot parse {raw:?}"))),
        }
    }

    /// Comma-separated triple such as `1.2, 1.0, 0.8`.
    pub fn get_triple_or<T: FromStr + Copy>(&self, key: &str, default: [T; 3]) -> Result<[T; 3]> {
        let Some(raw) = self.entries.get(key) else {
            return Ok(default);
        };
        let parts: Vec<&str> = raw.split(',').map(str::trim).collect();
        let bad = || CoreError::invalid(format!("{key}: expected three comma-separated values, got {raw:?}"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let mut out = default;
        for (slot, part) in out.iter_mut().zip(parts) {
            *slot = part.parse().map_err(|_| bad())?;
        }
        Ok(out)
    }

    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub fn triple<T: Display>(v: [T; 3]) -> String {
    format!("{}, {}, {}", v[0], v[1], v[2])
}
