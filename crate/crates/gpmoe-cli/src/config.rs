//! Plain-text `key=value` configuration files.
//!
//! Keys mirror the long flag names (`particles=16`, `resample-threshold=0.4`;
//! dashes and underscores are interchangeable). Values given on the command
//! line always win over the file.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Default)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

fn normalize_key(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('_', "-")
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("reading config {}", path.display()), e))?;
        let mut values = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::input(format!(
                    "{}:{}: expected key=value, got '{line}'",
                    path.display(),
                    lineno + 1
                )));
            };
            values.insert(normalize_key(key), value.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    /// Take (and consume) a typed value for `key`.
    pub fn take<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.values.remove(&normalize_key(key)) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| CliError::input(format!("config key '{key}': cannot parse '{raw}'"))),
        }
    }

    /// Booleans accept true/false/1/0/yes/no.
    pub fn take_bool(&mut self, key: &str) -> Result<Option<bool>> {
        match self.values.remove(&normalize_key(key)) {
            None => Ok(None),
            Some(raw) => match raw.to_ascii_lowercase().as_str() {
                "true" | "1" | "yes" | "on" => Ok(Some(true)),
                "false" | "0" | "no" | "off" => Ok(Some(false)),
                _ => Err(CliError::input(format!("config key '{key}': cannot parse '{raw}' as a flag"))),
            },
        }
    }

    /// Error out on keys nothing consumed.
    pub fn finish(self) -> Result<()> {
        if let Some(key) = self.values.keys().next() {
            return Err(CliError::input(format!("config file has unrecognized key '{key}'")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn cfg(content: &str) -> FileConfig {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        FileConfig::load(f.path()).unwrap()
    }

    #[test]
    fn parses_and_types_values() {
        let mut c = cfg("# comment\nparticles = 8\nresample_threshold=0.4\nallow-new-arm = yes\n");
        assert_eq!(c.take::<usize>("particles").unwrap(), Some(8));
        assert_eq!(c.take::<f64>("resample-threshold").unwrap(), Some(0.4));
        assert_eq!(c.take_bool("allow-new-arm").unwrap(), Some(true));
        assert!(c.take::<u64>("seed").unwrap().is_none());
        c.finish().unwrap();
    }

    #[test]
    fn unknown_keys_are_errors() {
        let c = cfg("sneaky=1\n");
        assert!(c.finish().is_err());
    }

    #[test]
    fn malformed_lines_and_values_are_errors() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(b"just a line\n").unwrap();
        assert!(FileConfig::load(f.path()).is_err());

        let mut c = cfg("particles = many\n");
        assert!(c.take::<usize>("particles").is_err());
    }
}
