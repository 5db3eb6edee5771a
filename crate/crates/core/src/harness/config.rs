//! Plain `key = value` configuration with a fixed set of allowed keys.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    allowed: Vec<String>,
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn new(allowed: &[&str]) -> Self {
        Config {
            allowed: allowed.iter().map(|s| s.to_string()).collect(),
            values: BTreeMap::new(),
        }
    }

    /// Parses lines of `key = value`; `#` starts a comment.
    pub fn parse(text: &str, allowed: &[&str]) -> Result<Self> {
        let mut c = Self::new(allowed);
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidInput(format!("config line {}: expected key = value", ln + 1))
            })?;
            c.set(k.trim(), v.trim())?;
        }
        Ok(c)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.allowed.iter().any(|a| a == key) {
            return Err(Error::InvalidInput(format!(
                "unknown config key '{key}' (allowed: {})",
                self.allowed.join(", ")
            )));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::InvalidInput(format!("override '{pair}' is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::InvalidInput(format!("config key '{key}': cannot parse '{v}'"))),
        }
    }

    pub fn get_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse()
                        .map_err(|_| Error::InvalidInput(format!("config key '{key}': bad number '{x}'")))
                })
                .collect::<Result<Vec<f64>>>()
                .map(Some),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &String)> {
        self.values.iter()
    }
}
