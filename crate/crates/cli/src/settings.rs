//! Layered `key=value` settings: command-line flag, then config file, then
//! built-in default.
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

/// Reads a config file: one `key = value` per line, `#` starts a comment.
pub fn read_file(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!("{}:{}: expected key=value, got {raw:?}", path.display(), n + 1))
        })?;
        out.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    Ok(out)
}

impl Settings {
    /// `defaults` fixes the set of known keys; anything else in `file` is an error.
    pub fn layered(
        defaults: &[(&str, &str)],
        file: Option<BTreeMap<String, String>>,
        flags: Vec<(&str, Option<String>)>,
    ) -> Result<Settings, CliError> {
        let mut values: BTreeMap<String, String> =
            defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        for (k, v) in file.unwrap_or_default() {
            match values.get_mut(&k) {
                Some(slot) => *slot = v,
                None => return Err(CliError::Config(format!("unknown config key {k:?}"))),
            }
        }
        for (k, v) in flags {
            if let Some(v) = v {
                debug_assert!(values.contains_key(k), "flag {k} has no default");
                values.insert(k.to_owned(), v);
            }
        }
        Ok(Settings { values })
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| CliError::Config(format!("{key}={raw:?}: {e}")))
    }

    pub fn flag(&self, key: &str) -> Result<bool, CliError> {
        match self.raw(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" | "" => Ok(false),
            other => Err(CliError::Config(format!("{key}={other:?}: expected true or false"))),
        }
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }
}
