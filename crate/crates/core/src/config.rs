//! `key=value` text configuration with strict key accounting.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { key: String, line: usize },
    #[error("key `{key}`: cannot parse {value:?}: {msg}")]
    Value { key: String, value: String, msg: String },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("unknown keys: {}", .0.join(", "))]
    Unknown(Vec<String>),
}

/// Parsed `key=value` lines. `#` starts a comment; blank lines are ignored.
///
/// Every lookup marks its key as used so [`KeyValues::finish`] can reject
/// keys nobody asked for.
#[derive(Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: i + 1, msg: format!("expected key=value, got {line:?}") })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1, msg: "empty key".into() });
            }
            if entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(ConfigError::Duplicate { key: k.to_string(), line: i + 1 });
            }
        }
        Ok(KeyValues { entries, used: RefCell::default() })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        let v = self.entries.get(key)?;
        self.used.borrow_mut().insert(key.to_string());
        Some(v)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse::<T>().map_err(|e| ConfigError::Value { key: key.into(), value: v.into(), msg: e.to_string() })
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: Display,
    {
        self.get(key)?.ok_or_else(|| ConfigError::Missing(key.into()))
    }

    /// Comma separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T::Err: Display,
    {
        let Some(v) = self.raw(key) else { return Ok(None) };
        v.split(',')
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<T>().map_err(|e| ConfigError::Value { key: key.into(), value: v.into(), msg: e.to_string() }))
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    /// Keys starting with `prefix`, in sorted order.
    pub fn keys_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries.keys().filter(move |k| k.starts_with(prefix)).map(|k| k.as_str())
    }

    /// Errors if any key was never looked up.
    pub fn finish(&self) -> Result<(), ConfigError> {
        let used = self.used.borrow();
        let unknown: Vec<String> = self.entries.keys().filter(|k| !used.contains(*k)).cloned().collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Unknown(unknown))
        }
    }
}

/// Inclusive numeric range written `lo..hi` or a single value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Span<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: FromStr + PartialOrd + Copy> FromStr for Span<T>
where
    T::Err: Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parse = |v: &str| v.trim().parse::<T>().map_err(|e| e.to_string());
        let (lo, hi) = match s.split_once("..") {
            Some((a, b)) => (parse(a)?, parse(b)?),
            None => {
                let v = parse(s)?;
                (v, v)
            }
        };
        if hi < lo {
            return Err("range upper bound below lower bound".into());
        }
        Ok(Span { lo, hi })
    }
}

impl<T: Display + PartialEq> Display for Span<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.lo == self.hi {
            write!(f, "{}", self.lo)
        } else {
            write!(f, "{}..{}", self.lo, self.hi)
        }
    }
}
