//! `key = value` configuration files with `#` comments.
//!
//! Keys use underscores; a dash is accepted as an alias for an underscore
//! so that file keys and `--flag-name` spellings are interchangeable.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Ordered key/value pairs as they appear in the file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues(pub Vec<(String, String)>);

pub fn normalize_key(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() || (line.starts_with('[') && line.ends_with(']')) {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `key = value`, got `{}`", i + 1, raw.trim()))
            })?;
            let k = normalize_key(k);
            if k.is_empty() {
                return Err(Error::config(format!("line {}: empty key", i + 1)));
            }
            out.push((k, v.trim().to_string()));
        }
        Ok(Self(out))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn render(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub(crate) fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("`{key}`: cannot parse `{value}`")))
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

/// Comma- or whitespace-separated list.
pub(crate) fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_aliases() {
        let kv = KeyValues::parse("# header\n[train]\nbatch-size = 64 # inline\n\nseed=7\n").unwrap();
        assert_eq!(
            kv.0,
            vec![("batch_size".into(), "64".into()), ("seed".into(), "7".into())]
        );
        assert_eq!(KeyValues::parse(&kv.render()).unwrap(), kv);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(KeyValues::parse("novalue\n").is_err());
        assert!(KeyValues::parse(" = 3\n").is_err());
    }

    #[test]
    fn value_helpers() {
        assert_eq!(parse_list::<u32>("s", "64, 32 16").unwrap(), vec![64, 32, 16]);
        assert!(parse_bool("d", "maybe").is_err());
        assert!(parse_value::<f64>("x", "abc").is_err());
    }
}
