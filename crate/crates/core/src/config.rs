//! Flat `key = value` text with `[section]` headers, one level deep.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a config
//! written by [`Ini::to_text`] parses back to bit-identical values.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ini {
    sections: Vec<(String, Vec<(String, String)>)>,
}

impl Ini {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parse text. `#` and `;` start comment lines; keys before any header
    /// land in the unnamed section `""`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut ini = Ini::new();
        let mut current = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::config(format!("line {}: unterminated section header", n + 1)))?;
                current = name.trim().to_string();
                ini.section_mut(&current);
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::config(format!("line {}: empty key", n + 1)));
            }
            if ini.get(&current, k).is_some() {
                return Err(Error::config(format!("line {}: duplicate key '{k}' in [{current}]", n + 1)));
            }
            ini.set(&current, k, v.trim());
        }
        Ok(ini)
    }

    fn section_mut(&mut self, name: &str) -> &mut Vec<(String, String)> {
        let idx = match self.sections.iter().position(|(s, _)| s == name) {
            Some(i) => i,
            None => {
                self.sections.push((name.to_string(), Vec::new()));
                self.sections.len() - 1
            }
        };
        &mut self.sections[idx].1
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Display) {
        let value = value.to_string();
        let sec = self.section_mut(section);
        match sec.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => sec.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .iter()
            .find(|(s, _)| s == section)
            .and_then(|(_, kv)| kv.iter().find(|(k, _)| k == key))
            .map(|(_, v)| v.as_str())
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.iter().any(|(s, _)| s == section)
    }

    pub fn keys(&self, section: &str) -> Vec<&str> {
        self.sections
            .iter()
            .find(|(s, _)| s == section)
            .map(|(_, kv)| kv.iter().map(|(k, _)| k.as_str()).collect())
            .unwrap_or_default()
    }

    /// Parsed value, `Ok(None)` when absent.
    pub fn parse_opt<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::config(format!("[{section}] {key}: cannot parse '{v}'"))),
        }
    }

    pub fn parse_or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T> {
        Ok(self.parse_opt(section, key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, section: &str, key: &str) -> Result<T> {
        self.parse_opt(section, key)?
            .ok_or_else(|| Error::config(format!("[{section}] {key} is required")))
    }

    /// Reject keys in `section` not listed in `allowed`, catching typos.
    pub fn check_keys(&self, section: &str, allowed: &[&str]) -> Result<()> {
        for k in self.keys(section) {
            if !allowed.contains(&k) {
                return Err(Error::config(format!("unknown key '{k}' in [{section}]")));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, kv) in &self.sections {
            if !name.is_empty() {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{name}]\n"));
            }
            for (k, v) in kv {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }
}

/// Comma-separated list, e.g. `12, 15, 18`.
pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse().map_err(|_| Error::config(format!("bad list element '{x}'"))))
        .collect()
}

pub fn format_list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_round_trip() {
        let text = "# comment\ntop = 1\n[model]\nlatent_dim = 2\nname = a b\n\n[train]\nlr = 0.1\n";
        let ini = Ini::parse(text).unwrap();
        assert_eq!(ini.get("", "top"), Some("1"));
        assert_eq!(ini.get("model", "name"), Some("a b"));
        assert_eq!(ini.require::<usize>("model", "latent_dim").unwrap(), 2);
        assert_eq!(ini.parse_or("train", "steps", 7usize).unwrap(), 7);
        let again = Ini::parse(&ini.to_text()).unwrap();
        assert_eq!(ini, again);
    }

    #[test]
    fn floats_round_trip_bit_exact() {
        let mut ini = Ini::new();
        let x = 0.1f64 + 0.2;
        ini.set("s", "x", x);
        let back: f64 = Ini::parse(&ini.to_text()).unwrap().require("s", "x").unwrap();
        assert_eq!(back.to_bits(), x.to_bits());
    }

    #[test]
    fn errors() {
        assert!(Ini::parse("[open\n").is_err());
        assert!(Ini::parse("novalue\n").is_err());
        assert!(Ini::parse("a=1\na=2\n").is_err());
        let ini = Ini::parse("[m]\nx = q\n").unwrap();
        assert!(ini.require::<f64>("m", "x").is_err());
        assert!(ini.require::<f64>("m", "y").is_err());
        assert!(ini.check_keys("m", &["z"]).is_err());
        assert!(ini.check_keys("m", &["x"]).is_ok());
    }

    #[test]
    fn lists() {
        assert_eq!(parse_list::<usize>("12, 15,18").unwrap(), vec![12, 15, 18]);
        assert_eq!(format_list(&[1.5, 2.0]), "1.5, 2");
        assert!(parse_list::<usize>("1, x").is_err());
    }
}
