//! Flat `key=value` config files.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected key=value")]
    BadLine { path: String, line: usize },
    #[error("missing key {0}")]
    MissingKey(String),
    #[error("bad value for {key}: {value:?}")]
    BadValue { key: String, value: String },
}

/// Read a `key=value` file. Blank lines and `#` comments are skipped.
pub fn read_kv(path: &Path) -> Result<BTreeMap<String, String>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_kv(&text, &path.display().to_string())
}

pub fn parse_kv(text: &str, path: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::BadLine {
                path: path.to_string(),
                line: i + 1,
            });
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

pub fn require<'a>(
    kv: &'a BTreeMap<String, String>,
    key: &str,
) -> Result<&'a String, ConfigError> {
    kv.get(key).ok_or_else(|| ConfigError::MissingKey(key.to_string()))
}

pub fn parse_value<T: std::str::FromStr>(
    kv: &BTreeMap<String, String>,
    key: &str,
) -> Result<T, ConfigError> {
    let raw = require(kv, key)?;
    raw.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: raw.clone(),
    })
}

pub fn parse_or<T: std::str::FromStr>(
    kv: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T, ConfigError> {
    match kv.get(key) {
        Some(raw) => raw.parse().map_err(|_| ConfigError::BadValue {
            key: key.to_string(),
            value: raw.clone(),
        }),
        None => Ok(default),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_skips_comments() {
        let kv = parse_kv("# header\nn_users = 10\n\naffinity=0.85\n", "test").unwrap();
        assert_eq!(kv.get("n_users").unwrap(), "10");
        assert_eq!(kv.get("affinity").unwrap(), "0.85");
    }

    #[test]
    fn rejects_bare_lines() {
        let err = parse_kv("oops\n", "test").unwrap_err();
        assert!(err.to_string().contains("test:1"));
    }

    #[test]
    fn missing_key_is_named() {
        let kv = parse_kv("", "test").unwrap();
        let err = parse_value::<u32>(&kv, "n_users").unwrap_err();
        assert!(err.to_string().contains("n_users"));
    }
}
