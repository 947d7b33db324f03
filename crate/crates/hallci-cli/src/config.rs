//! Flat `key=value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use hallci::{Error, Result};

/// Every key a run understands.
pub const KEYS: &[&str] = &[
    "a", "alpha1", "alpha2", "b", "beta", "delta", "dir", "epsilon", "family", "grid", "lambdas", "l", "m",
    "m_const", "mu", "nt", "nu1", "nu2", "out", "q", "samples", "scale", "schedule", "seed", "sigma",
    "snapshots", "t", "threads", "weak_tests",
];

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn with_defaults(defaults: &[(&str, &str)]) -> Self {
        let values = defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        RunConfig { values }
    }

    /// Merges a config file over the current values. Blank lines and `#` comments are skipped.
    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        if !path.is_file() {
            return Err(Error::ConfigNotFound(path.display().to_string()));
        }
        let text = std::fs::read_to_string(path)?;
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Param(format!("{}:{}: expected key=value", path.display(), no + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(Error::Param(format!("unknown config key '{key}'")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn set_opt<T: Display>(&mut self, key: &str, value: &Option<T>) -> Result<()> {
        match value {
            Some(v) => self.set(key, &v.to_string()),
            None => Ok(()),
        }
    }

    pub fn has(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.values.get(key).map(String::as_str).ok_or_else(|| Error::Param(format!("missing config key '{key}'")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key)?;
        raw.parse().map_err(|_| Error::Param(format!("invalid value for '{key}': {raw}")))
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        if self.has(key) {
            self.get(key).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn list(&self, key: &str) -> Result<Vec<f64>> {
        self.raw(key)?
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| Error::Param(format!("invalid value for '{key}': {s}"))))
            .collect()
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        Ok(PathBuf::from(self.raw(key)?))
    }

    pub fn map(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// The resolved configuration in the same format it is read from.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_override_defaults_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# desk run\nmu = 32\n\nlambdas=4, 8,16\n").unwrap();
        let mut c = RunConfig::with_defaults(&[("mu", "16"), ("grid", "64")]);
        c.merge_file(&path).unwrap();
        assert_eq!(c.get::<f64>("mu").unwrap(), 32.0);
        assert_eq!(c.get::<usize>("grid").unwrap(), 64);
        assert_eq!(c.list("lambdas").unwrap(), vec![4.0, 8.0, 16.0]);
        let again = dir.path().join("resolved.cfg");
        std::fs::write(&again, c.render()).unwrap();
        let mut d = RunConfig::default();
        d.merge_file(&again).unwrap();
        assert_eq!(d.map(), c.map());
    }

    #[test]
    fn unknown_keys_and_missing_files_are_errors() {
        let mut c = RunConfig::default();
        assert!(c.set("gird", "64").unwrap_err().to_string().contains("unknown config key"));
        let err = c.merge_file(Path::new("/nonexistent/missing.cfg")).unwrap_err();
        assert!(err.to_string().starts_with("config not found"));
        c.set("mu", "sixteen").unwrap();
        assert!(c.get::<f64>("mu").is_err());
    }
}
