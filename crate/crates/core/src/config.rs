//! Line-oriented `key = value` settings with a fixed key table per command.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected so a typo never silently falls back to a default.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

/// Parses `key = value` lines into `(line number, key, value)`.
pub fn parse(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got {line:?}", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::config(format!("line {}: empty key", i + 1)));
        }
        out.push((i + 1, k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Settings {
    keys: &'static [Key],
    values: BTreeMap<&'static str, String>,
}

impl Settings {
    pub fn new(keys: &'static [Key]) -> Self {
        Self {
            keys,
            values: keys.iter().map(|k| (k.name, k.default.to_string())).collect(),
        }
    }

    fn key(&self, name: &str) -> Option<&'static Key> {
        self.keys.iter().find(|k| k.name == name)
    }

    pub fn set(&mut self, name: &str, value: impl Into<String>) -> Result<()> {
        let key = self.key(name).ok_or_else(|| {
            let known: Vec<&str> = self.keys.iter().map(|k| k.name).collect();
            Error::config(format!("unknown setting {name:?}; known settings: {}", known.join(", ")))
        })?;
        self.values.insert(key.name, value.into());
        Ok(())
    }

    /// Applies `key = value` text, e.g. the contents of a config file.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (line, k, v) in parse(text).map_err(|e| Error::config(format!("{origin}: {e}")))? {
            self.set(&k, v)
                .map_err(|e| Error::config(format!("{origin} line {line}: {e}")))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies `key=value` pairs given on the command line.
    pub fn apply_pairs(&mut self, pairs: &[String]) -> Result<()> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::config(format!("--set expects key=value, got {p:?}")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn raw(&self, name: &str) -> &str {
        self.values
            .get(name)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("setting {name} is not in the key table"))
    }

    pub fn get<T: FromStr>(&self, name: &str) -> Result<T> {
        let v = self.raw(name);
        v.parse()
            .map_err(|_| Error::config(format!("setting {name} = {v:?} is not a valid value")))
    }

    /// `None` for an empty value or `none`.
    pub fn get_opt<T: FromStr>(&self, name: &str) -> Result<Option<T>> {
        match self.raw(name) {
            "" | "none" => Ok(None),
            _ => self.get(name).map(Some),
        }
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, name: &str) -> Result<Vec<T>> {
        let v = self.raw(name);
        v.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::config(format!("setting {name} = {v:?} has an invalid entry {s:?}")))
            })
            .collect()
    }

    /// Every setting as `key = value`, in key-table order.
    pub fn render(&self) -> String {
        self.keys
            .iter()
            .map(|k| format!("{} = {}\n", k.name, self.values[k.name]))
            .collect()
    }

    pub fn keys(&self) -> &'static [Key] {
        self.keys
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KEYS: &[Key] = &[
        Key {
            name: "epochs",
            default: "40",
            help: "",
        },
        Key {
            name: "lr",
            default: "0.001",
            help: "",
        },
        Key {
            name: "decay",
            default: "30",
            help: "",
        },
    ];

    #[test]
    fn file_then_override() {
        let mut s = Settings::new(KEYS);
        s.apply_text("# comment\n\nepochs = 5\nlr=0.01\n", "test").unwrap();
        s.apply_pairs(&["epochs=7".into()]).unwrap();
        assert_eq!(s.get::<usize>("epochs").unwrap(), 7);
        assert_eq!(s.get::<f64>("lr").unwrap(), 0.01);
        assert_eq!(s.render(), "epochs = 7\nlr = 0.01\ndecay = 30\n");
    }

    #[test]
    fn unknown_and_malformed_rejected() {
        let mut s = Settings::new(KEYS);
        let err = s.apply_text("epochs = 5\nepoch = 6\n", "f.cfg").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("epoch"), "{err}");
        assert!(s.apply_text("just words\n", "f.cfg").is_err());
        s.set("lr", "fast").unwrap();
        assert!(s.get::<f64>("lr").is_err());
    }

    #[test]
    fn optional_values() {
        let mut s = Settings::new(KEYS);
        s.set("decay", "none").unwrap();
        assert_eq!(s.get_opt::<usize>("decay").unwrap(), None);
        s.set("decay", "12").unwrap();
        assert_eq!(s.get_opt::<usize>("decay").unwrap(), Some(12));
    }
}
