//! `key=value` run configuration: values come from flags, then the
//! `--config` file, then defaults, and every resolved value is recorded.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Default)]
pub struct Conf {
    file: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl Conf {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut conf = Conf::default();
        let Some(path) = path else { return Ok(conf) };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
            conf.file.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(conf)
    }

    fn lookup<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.file
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| CliError::Usage(format!("config key {key}: invalid value {v:?}")))
            })
            .transpose()
    }

    pub fn record(&mut self, key: &str, value: impl Display) {
        self.resolved.insert(key.to_string(), value.to_string());
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError> {
        let v = match flag {
            Some(v) => v,
            None => self.lookup(key)?.unwrap_or(default),
        };
        self.record(key, &v);
        Ok(v)
    }

    pub fn opt<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError> {
        let v = match flag {
            Some(v) => Some(v),
            None => self.lookup(key)?,
        };
        if let Some(v) = &v {
            self.record(key, v);
        }
        Ok(v)
    }

    pub fn require<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T, CliError> {
        self.opt(key, flag)?
            .ok_or_else(|| CliError::Usage(format!("missing --{key} (or {key}= in the config file)")))
    }

    pub fn path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>, CliError> {
        let v = flag.or_else(|| self.file.get(key).map(PathBuf::from));
        if let Some(p) = &v {
            self.record(key, p.display());
        }
        Ok(v)
    }

    pub fn require_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
        self.path(key, flag)?
            .ok_or_else(|| CliError::Usage(format!("missing --{key} (or {key}= in the config file)")))
    }

    pub fn to_text(&self) -> String {
        self.resolved.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Writes the resolved configuration as `run.conf` in `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), CliError> {
        crate::io::write(&dir.join("run.conf"), self.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.conf");
        std::fs::write(&p, "# comment\nlr=0.5\nbatch = 8\n").unwrap();
        let mut c = Conf::load(Some(&p)).unwrap();
        assert_eq!(c.get("lr", Some(0.1), 0.2).unwrap(), 0.1);
        assert_eq!(c.get("batch", None, 64usize).unwrap(), 8);
        assert_eq!(c.get("epochs", None, 10usize).unwrap(), 10);
        assert_eq!(c.to_text(), "batch=8\nepochs=10\nlr=0.1\n");
        assert!(c.require::<u32>("missing", None).is_err());
        std::fs::write(&p, "batch=x\n").unwrap();
        let mut bad = Conf::load(Some(&p)).unwrap();
        assert!(bad.get("batch", None, 1usize).is_err());
    }
}
