//! Flat `key=value` configuration files.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Values are taken verbatim after trimming. Duplicate keys are rejected so
//! a typo cannot silently lose an earlier setting.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if !key
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
        {
            return Err(Error::Config(format!(
                "line {}: key `{key}` contains unsupported characters",
                lineno + 1
            )));
        }
        if map.insert(key.to_string(), value.to_string()).is_some() {
            return Err(Error::Config(format!(
                "line {}: duplicate key `{key}`",
                lineno + 1
            )));
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_assignments_and_skips_noise() {
        let map = parse_config("# comment\n\n lr = 0.001 \nbatch_size=4\n").unwrap();
        assert_eq!(map.get("lr").unwrap(), "0.001");
        assert_eq!(map.get("batch_size").unwrap(), "4");
        assert_eq!(map.len(), 2);
    }

    #[test]
    fn value_may_contain_equals() {
        let map = parse_config("path=/a/b=c\n").unwrap();
        assert_eq!(map.get("path").unwrap(), "/a/b=c");
    }

    #[test]
    fn duplicate_key_is_an_error() {
        assert!(parse_config("a=1\na=2\n").is_err());
    }

    #[test]
    fn missing_equals_is_an_error() {
        assert!(parse_config("just a line\n").is_err());
    }

    #[test]
    fn weird_key_characters_rejected() {
        assert!(parse_config("bad key=1\n").is_err());
    }
}
