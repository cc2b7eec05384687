//! Flat `key = value` configuration with command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

/// One configurable parameter. The flag is `--name` with `_` spelled `-`.
#[derive(Debug, Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    pub help: &'static str,
}

pub const fn key(name: &'static str, help: &'static str) -> Key {
    Key { name, help }
}

pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn canonical(key: &str) -> String {
    key.trim().replace('-', "_")
}

/// Parses `key = value` lines. `#` starts a comment.
pub fn parse_file(text: &str, origin: &Path) -> Result<Vec<(String, String, usize)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Usage(format!(
                "{}:{}: expected `key = value`",
                origin.display(),
                i + 1
            )));
        };
        out.push((canonical(k), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

/// Values for one command: config file entries overridden by flags.
#[derive(Debug, Clone)]
pub struct Resolved {
    keys: &'static [Key],
    values: BTreeMap<String, String>,
}

impl Resolved {
    pub fn new(
        keys: &'static [Key],
        file: Option<&Path>,
        flags: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            for (k, v, line) in parse_file(&text, path)? {
                if !keys.iter().any(|key| key.name == k) {
                    return Err(CliError::Usage(format!(
                        "{}:{line}: unknown key `{k}`",
                        path.display()
                    )));
                }
                values.insert(k, v);
            }
        }
        for (k, v) in flags {
            values.insert(canonical(&k), v);
        }
        Ok(Self { keys, values })
    }

    /// Sets `key` unless the user already did.
    pub fn default(&mut self, key: &str, value: impl ToString) {
        self.values
            .entry(key.to_string())
            .or_insert_with(|| value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str, CliError> {
        self.get(key)
            .ok_or_else(|| CliError::Usage(format!("missing required --{}", flag_name(key))))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.require(key).map(PathBuf::from)
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|e| CliError::Usage(format!("invalid value `{raw}` for {key}: {e}")))
    }

    pub fn with<T>(
        &self,
        key: &str,
        f: impl FnOnce(&str) -> Result<T, String>,
    ) -> Result<T, CliError> {
        let raw = self.require(key)?;
        f(raw).map_err(|e| CliError::Usage(format!("invalid value `{raw}` for {key}: {e}")))
    }

    /// Every set key in table order, as a config file.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for k in self.keys {
            if let Some(v) = self.values.get(k.name) {
                let _ = writeln!(out, "{} = {v}", k.name);
            }
        }
        out
    }
}
