//! Flat dotted-key configuration: one `key = value` per line, `#` comments,
//! overridden by `--key=value` flags. Unknown keys are rejected after all
//! consumers have taken their values.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

#[derive(Debug, Clone)]
pub enum ConfigError {
    Io { path: String, message: String },
    Syntax { line: usize, text: String },
    UnknownKey { key: String },
    BadValue { key: String, value: String, expected: &'static str },
    OutOfRange { key: String, value: String, range: &'static str },
    Missing { key: String },
    Conflict { message: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io { path, message } => write!(f, "{}: {}", path, message),
            ConfigError::Syntax { line, text } => {
                write!(f, "line {}: expected `key = value`, got `{}`", line, text)
            }
            ConfigError::UnknownKey { key } => write!(f, "unknown config key `{}`", key),
            ConfigError::BadValue { key, value, expected } => {
                write!(f, "key `{}`: `{}` is not {}", key, value, expected)
            }
            ConfigError::OutOfRange { key, value, range } => {
                write!(f, "key `{}`: {} outside {}", key, value, range)
            }
            ConfigError::Missing { key } => write!(f, "missing required key `{}`", key),
            ConfigError::Conflict { message } => write!(f, "{}", message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Raw key-value map plus consumption tracking.
#[derive(Debug, Clone, Default)]
pub struct FlatConfig {
    entries: BTreeMap<String, String>,
    consumed: BTreeSet<String>,
}

impl FlatConfig {
    pub fn parse(text: &str) -> Result<FlatConfig, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax { line: i + 1, text: raw.trim().to_string() });
            };
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(FlatConfig { entries, consumed: BTreeSet::new() })
    }

    /// Applies a `--key=value` override.
    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.trim().to_string(), value.trim().to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get_str(&mut self, key: &str, default: &str) -> String {
        self.consumed.insert(key.to_string());
        self.entries.get(key).cloned().unwrap_or_else(|| default.to_string())
    }

    pub fn get_opt(&mut self, key: &str) -> Option<String> {
        self.consumed.insert(key.to_string());
        self.entries.get(key).cloned()
    }

    pub fn get_f64(&mut self, key: &str, default: f64) -> Result<f64, ConfigError> {
        self.consumed.insert(key.to_string());
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: v.clone(),
                expected: "a number",
            }),
        }
    }

    pub fn get_usize(&mut self, key: &str, default: usize) -> Result<usize, ConfigError> {
        self.consumed.insert(key.to_string());
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: v.clone(),
                expected: "a nonnegative integer",
            }),
        }
    }

    pub fn get_u64(&mut self, key: &str, default: u64) -> Result<u64, ConfigError> {
        self.consumed.insert(key.to_string());
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: v.clone(),
                expected: "a nonnegative integer",
            }),
        }
    }

    pub fn get_bool(&mut self, key: &str, default: bool) -> Result<bool, ConfigError> {
        self.consumed.insert(key.to_string());
        match self.entries.get(key).map(String::as_str) {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(v) => Err(ConfigError::BadValue {
                key: key.to_string(),
                value: v.to_string(),
                expected: "a boolean",
            }),
        }
    }

    /// Errors on the first key no consumer asked for.
    pub fn reject_unknown(&self) -> Result<(), ConfigError> {
        for key in self.entries.keys() {
            if !self.consumed.contains(key) {
                return Err(ConfigError::UnknownKey { key: key.clone() });
            }
        }
        Ok(())
    }

    /// Deterministic rendering of the effective configuration.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(&format!("{} = {}\n", k, v));
        }
        out
    }
}

pub fn range_check(
    key: &'static str,
    value: f64,
    lo: f64,
    hi: f64,
    range: &'static str,
) -> Result<f64, ConfigError> {
    if value < lo || value > hi || !value.is_finite() {
        return Err(ConfigError::OutOfRange {
            key: key.to_string(),
            value: format!("{}", value),
            range,
        });
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_set_and_reject() {
        let mut cfg = FlatConfig::parse("a.b = 1\n# comment\nmode = semi  # trailing\n").unwrap();
        assert_eq!(cfg.get_str("mode", "x"), "semi");
        assert_eq!(cfg.get_usize("a.b", 0).unwrap(), 1);
        cfg.set("a.b", "2");
        assert_eq!(cfg.get_usize("a.b", 0).unwrap(), 2);
        cfg.reject_unknown().unwrap();

        let mut cfg = FlatConfig::parse("mystery.key = 3\n").unwrap();
        let _ = cfg.get_str("mode", "x");
        match cfg.reject_unknown() {
            Err(ConfigError::UnknownKey { key }) => assert_eq!(key, "mystery.key"),
            other => panic!("unexpected {:?}", other),
        }
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        match FlatConfig::parse("ok = 1\nnot a pair\n") {
            Err(ConfigError::Syntax { line: 2, .. }) => {}
            other => panic!("unexpected {:?}", other),
        }
    }
}
