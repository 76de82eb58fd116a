//! Flat `key = value` configuration text.
//!
//! One entry per line, `#` starts a comment, blank lines are ignored. Keys are
//! unique. Consumers take the keys they know with [`KvConfig::take`] and call
//! [`KvConfig::finish`], which rejects anything left over.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn from_map(entries: BTreeMap<String, String>) -> Self {
        Self { entries }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", lineno + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    /// Remove and return every entry under `prefix.`, with the prefix stripped.
    pub fn take_prefixed(&mut self, prefix: &str) -> KvConfig {
        let dotted = format!("{prefix}.");
        let keys: Vec<String> = self.entries.keys().filter(|k| k.starts_with(&dotted)).cloned().collect();
        let mut out = BTreeMap::new();
        for k in keys {
            let v = self.entries.remove(&k).unwrap();
            out.insert(k[dotted.len()..].to_string(), v);
        }
        KvConfig { entries: out }
    }

    /// Fail if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            None => Ok(()),
            Some(_) => Err(Error::Config(format!(
                "unknown config keys: {}",
                self.entries.keys().cloned().collect::<Vec<_>>().join(", ")
            ))),
        }
    }
}

pub fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_rejects_leftovers() {
        let mut kv = KvConfig::parse("# header\nsteps = 10\n\nlr=0.5 # peak\nmodel.dim = 8\n").unwrap();
        assert_eq!(kv.take("steps").as_deref(), Some("10"));
        let model = kv.take_prefixed("model");
        assert_eq!(model.get("dim"), Some("8"));
        assert!(kv.clone().finish().is_err());
        kv.take("lr");
        kv.finish().unwrap();
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(KvConfig::parse("novalue").is_err());
        assert!(KvConfig::parse("a = 1\na = 2").is_err());
        assert!(KvConfig::parse(" = 3").is_err());
        assert!(parse_num::<usize>("k", "-1").is_err());
        assert!(parse_bool("k", "maybe").is_err());
    }

    #[test]
    fn render_parses_back() {
        let kv = KvConfig::parse("b = 2\na = x y").unwrap();
        assert_eq!(KvConfig::parse(&kv.render()).unwrap(), kv);
    }
}
