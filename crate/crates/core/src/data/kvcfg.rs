//! Flat key=value configuration files with `[section]` headers, plus the
//! round-trip-exact float formatting used by every CSV the toolkit writes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Parsed config: sections in file order, keys in file order within each.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    sections: Vec<(String, Vec<(String, String)>)>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = KvConfig::new();
        let mut current = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    Error::parse(format!("line {}: unterminated section header '{raw}'", lineno + 1))
                })?;
                current = name.trim().to_string();
                cfg.ensure_section(&current);
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::parse(format!(
                    "line {}: expected key=value, got '{raw}'",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            let section = cfg.ensure_section(&current);
            if section.iter().any(|(k, _)| *k == key) {
                return Err(Error::parse(format!(
                    "line {}: duplicate key '{key}' in section '[{current}]'",
                    lineno + 1
                )));
            }
            section.push((key, value));
        }
        Ok(cfg)
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text).map_err(|e| Error::parse(format!("{}: {e}", path.display())))
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, entries) in &self.sections {
            if !name.is_empty() {
                out.push_str(&format!("[{name}]\n"));
            }
            for (k, v) in entries {
                out.push_str(&format!("{k}={v}\n"));
            }
        }
        out
    }

    fn ensure_section(&mut self, name: &str) -> &mut Vec<(String, String)> {
        if let Some(i) = self.sections.iter().position(|(n, _)| n == name) {
            return &mut self.sections[i].1;
        }
        self.sections.push((name.to_string(), Vec::new()));
        &mut self.sections.last_mut().unwrap().1
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl ToString) {
        let entries = self.ensure_section(section);
        let value = value.to_string();
        if let Some(e) = entries.iter_mut().find(|(k, _)| k == key) {
            e.1 = value;
        } else {
            entries.push((key.to_string(), value));
        }
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .iter()
            .find(|(n, _)| n == section)
            .and_then(|(_, entries)| entries.iter().find(|(k, _)| k == key))
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, section: &str, key: &str) -> Result<&str> {
        self.get(section, key).ok_or_else(|| {
            Error::config(format!("missing key '{key}' in section '[{section}]'"))
        })
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::parse(format!("key '{key}' in '[{section}]': cannot parse '{raw}'"))
            }),
        }
    }

    pub fn sections(&self) -> impl Iterator<Item = (&str, &[(String, String)])> {
        self.sections.iter().map(|(n, e)| (n.as_str(), e.as_slice()))
    }

    pub fn section_entries(&self, section: &str) -> &[(String, String)] {
        self.sections
            .iter()
            .find(|(n, _)| n == section)
            .map(|(_, e)| e.as_slice())
            .unwrap_or(&[])
    }
}

/// 17-significant-digit scientific form: parses back to the identical f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_sections_and_lookup() {
        let cfg = KvConfig::parse("# comment\ntop=1\n[train]\nlr=0.001\nepochs=10\n\n[data]\nseed=7\n").unwrap();
        assert_eq!(cfg.get("", "top"), Some("1"));
        assert_eq!(cfg.get("train", "lr"), Some("0.001"));
        assert_eq!(cfg.get_parsed::<usize>("train", "epochs").unwrap(), Some(10));
        assert_eq!(cfg.get("data", "seed"), Some("7"));
        assert_eq!(cfg.get("data", "missing"), None);
        assert!(cfg.require("data", "missing").is_err());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = KvConfig::parse("a=1\nnot a pair\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = KvConfig::parse("[oops\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        let err = KvConfig::parse("[s]\nk=1\nk=2\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn render_roundtrip() {
        let mut cfg = KvConfig::new();
        cfg.set("", "version", "dfkd-v0.1.0");
        cfg.set("run", "seed", 42u64);
        cfg.set("run", "out", "runs/x");
        let text = cfg.render();
        let again = KvConfig::parse(&text).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn f64_formatting_roundtrips_bitwise() {
        let mut rng = crate::rng::Rng::new(3);
        for _ in 0..2000 {
            let v = match rng.below(4) {
                0 => rng.normal(),
                1 => rng.normal() * 1e12,
                2 => rng.normal() * 1e-12,
                _ => rng.next_f64(),
            };
            let s = fmt_f64(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(v.to_bits(), back.to_bits(), "{v} -> {s} -> {back}");
        }
    }
}
