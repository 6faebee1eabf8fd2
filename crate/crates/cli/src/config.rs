//! Flat key=value configuration with sections, flag overrides and typed
//! accessors that report the offending key.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// A problem with the user's configuration; maps to exit code 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub type ConfigResult<T> = std::result::Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> ConfigResult<T> {
    Err(ConfigError(msg.into()))
}

/// Parses `a/b`, an integer or a decimal. A fraction is evaluated as one
/// correctly rounded division of its two parts.
pub fn parse_fraction(s: &str) -> Result<f64, String> {
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().map_err(|_| format!("bad numerator in '{s}'"))?;
            let d: f64 = d.trim().parse().map_err(|_| format!("bad denominator in '{s}'"))?;
            if d == 0.0 {
                return Err(format!("zero denominator in '{s}'"));
            }
            n / d
        }
        None => s.parse().map_err(|_| format!("'{s}' is not a number"))?,
    };
    if !v.is_finite() {
        return Err(format!("'{s}' is not finite"));
    }
    Ok(v)
}

/// Sections whose keys are never configuration.
const IGNORED_SECTIONS: [&str; 2] = ["run", "artifacts"];

/// Reads `key=value` lines. Keys before any section, in `[config]` or in
/// `[<command>]` apply; other command sections are skipped.
pub fn parse_config_text(text: &str, command: &str, commands: &[&str]) -> ConfigResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut active = true;
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            active = match name {
                "config" => true,
                n if n == command => true,
                n if IGNORED_SECTIONS.contains(&n) || commands.contains(&n) => false,
                n => return err(format!("line {}: unknown section [{n}]", no + 1)),
            };
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return err(format!("line {}: expected key=value, got '{line}'", no + 1));
        };
        if active {
            let k = k.trim().replace('-', "_");
            if k.is_empty() {
                return err(format!("line {}: empty key", no + 1));
            }
            out.insert(k, v.trim().to_string());
        }
    }
    Ok(out)
}

/// Splits `key=value` flag arguments.
pub fn parse_overrides(items: &[String]) -> ConfigResult<Vec<(String, String)>> {
    items
        .iter()
        .map(|s| match s.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().replace('-', "_"), v.trim().to_string())),
            _ => err(format!("--set expects key=value, got '{s}'")),
        })
        .collect()
}

/// Fully resolved settings: defaults, then file, then flags.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    values: BTreeMap<String, String>,
}

impl Resolved {
    pub fn new(
        command: &str,
        defaults: Vec<(&str, String)>,
        file: &BTreeMap<String, String>,
        flags: &[(String, String)],
    ) -> ConfigResult<Self> {
        let mut values: BTreeMap<String, String> = defaults.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        let known: BTreeSet<String> = values.keys().cloned().collect();
        for (k, v) in file.iter().chain(flags.iter().map(|(k, v)| (k, v))) {
            if !known.contains(k) {
                return err(format!("unknown key '{k}' for {command}"));
            }
            values.insert(k.clone(), v.clone());
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    /// `None` for an empty value.
    pub fn opt_str(&self, key: &str) -> Option<&str> {
        Some(self.str(key)).filter(|s| !s.is_empty())
    }

    pub fn f64(&self, key: &str) -> ConfigResult<f64> {
        parse_fraction(self.str(key)).map_err(|e| ConfigError(format!("key '{key}': {e}")))
    }

    pub fn opt_f64(&self, key: &str) -> ConfigResult<Option<f64>> {
        match self.opt_str(key) {
            None => Ok(None),
            Some(_) => self.f64(key).map(Some),
        }
    }

    pub fn usize(&self, key: &str) -> ConfigResult<usize> {
        let s = self.str(key);
        s.parse().map_err(|_| ConfigError(format!("key '{key}': '{s}' is not a non-negative integer")))
    }

    pub fn opt_usize(&self, key: &str) -> ConfigResult<Option<usize>> {
        match self.opt_str(key) {
            None => Ok(None),
            Some(_) => self.usize(key).map(Some),
        }
    }

    pub fn u64(&self, key: &str) -> ConfigResult<u64> {
        let s = self.str(key);
        s.parse().map_err(|_| ConfigError(format!("key '{key}': '{s}' is not a non-negative integer")))
    }

    pub fn bool(&self, key: &str) -> ConfigResult<bool> {
        match self.str(key) {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            s => err(format!("key '{key}': '{s}' is not a boolean")),
        }
    }

    /// Comma-separated numbers (fractions allowed); empty gives an empty list.
    pub fn f64_list(&self, key: &str) -> ConfigResult<Vec<f64>> {
        self.list(key).map(|s| parse_fraction(s).map_err(|e| ConfigError(format!("key '{key}': {e}")))).collect()
    }

    pub fn usize_list(&self, key: &str) -> ConfigResult<Vec<usize>> {
        self.list(key)
            .map(|s| s.parse().map_err(|_| ConfigError(format!("key '{key}': '{s}' is not a non-negative integer"))))
            .collect()
    }

    pub fn list<'a>(&'a self, key: &str) -> impl Iterator<Item = &'a str> {
        self.str(key).split(',').map(str::trim).filter(|s| !s.is_empty())
    }

    /// Parses with the value type's `FromStr`, naming the key on failure.
    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> ConfigResult<T>
    where
        T::Err: fmt::Display,
    {
        self.str(key).parse().map_err(|e: T::Err| ConfigError(format!("key '{key}': {e}")))
    }

    /// `key=value` lines, sorted by key.
    pub fn echo(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
