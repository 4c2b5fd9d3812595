//! Plain-text `key = value` configuration files.
//!
//! One setting per line; `#` starts a comment; blank lines are ignored.
//! Keys are dotted names such as `gan.lr_d`. Every key must be known to
//! the consumer, so typos fail loudly instead of silently using a default.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },

    #[error("line {line}: key `{key}` already set on line {first}")]
    Duplicate { key: String, line: usize, first: usize },

    #[error("{origin}: cannot parse `{key}` = {value:?}: {reason}")]
    Value {
        key: String,
        value: String,
        origin: String,
        reason: String,
    },

    #[error("unknown config key `{key}` ({origin})")]
    UnknownKey { key: String, origin: String },

    #[error("{path}: {message}")]
    Read { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Entry {
    value: String,
    /// Where the value came from, for diagnostics.
    origin: String,
}

/// Parsed settings, keyed by name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigMap {
    entries: BTreeMap<String, Entry>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = Self::default();
        let mut first_line = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    text: raw.to_string(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(ConfigError::Syntax {
                    line,
                    text: raw.to_string(),
                });
            }
            if let Some(&first) = first_line.get(key) {
                return Err(ConfigError::Duplicate {
                    key: key.to_string(),
                    line,
                    first,
                });
            }
            first_line.insert(key.to_string(), line);
            map.entries.insert(
                key.to_string(),
                Entry {
                    value: value.to_string(),
                    origin: format!("line {line}"),
                },
            );
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// Sets `key`, replacing any value from the file.
    pub fn set(&mut self, key: &str, value: impl Display, origin: &str) {
        self.entries.insert(
            key.to_string(),
            Entry {
                value: value.to_string(),
                origin: origin.to_string(),
            },
        );
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Parses `key` with `parse` when present.
    pub fn get_with<T, E: Display>(
        &self,
        key: &str,
        parse: impl FnOnce(&str) -> Result<T, E>,
    ) -> Result<Option<T>, ConfigError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(e) => parse(&e.value).map(Some).map_err(|err| ConfigError::Value {
                key: key.to_string(),
                value: e.value.clone(),
                origin: e.origin.clone(),
                reason: err.to_string(),
            }),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: Display,
    {
        self.get_with(key, str::parse)
    }

    /// Overwrites `slot` when `key` is present.
    pub fn apply<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<(), ConfigError>
    where
        T::Err: Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T::Err: Display,
    {
        self.get_with(key, |s| {
            s.split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(str::parse::<T>)
                .collect::<Result<Vec<_>, _>>()
        })
    }

    /// Fails on the first key not in `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<(), ConfigError> {
        match self.entries.iter().find(|(k, _)| !known.contains(&k.as_str())) {
            Some((key, e)) => Err(ConfigError::UnknownKey {
                key: key.clone(),
                origin: e.origin.clone(),
            }),
            None => Ok(()),
        }
    }
}
