//! Flat `key = value` configuration text with `[section]` headers.
//!
//! The same format serves config files, `--override section.key=value`
//! flags and the canonical config block stored in checkpoints. Typed configs
//! pull their keys out of a [`Section`]; anything left over is an error.

use std::fmt::Display;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvDoc {
    sections: IndexMap<String, IndexMap<String, String>>,
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = KvDoc::new();
        let mut current: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::config(format!("line {}: bad section header", lineno + 1)))?
                    .trim();
                if name.is_empty() {
                    return Err(Error::config(format!("line {}: empty section name", lineno + 1)));
                }
                doc.sections.entry(name.to_string()).or_default();
                current = Some(name.to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", lineno + 1)))?;
            let section = current
                .as_ref()
                .ok_or_else(|| Error::config(format!("line {}: key outside any section", lineno + 1)))?;
            doc.set(section, k.trim(), v.trim());
        }
        Ok(doc)
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.into());
    }

    /// Applies `section.key=value` (or `stage.N.key=value`).
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{spec}` is not key=value")))?;
        let (section, key) = path
            .trim()
            .rsplit_once('.')
            .ok_or_else(|| Error::UnknownKey(path.trim().to_string()))?;
        self.set(section, key, value.trim());
        Ok(())
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.keys().map(String::as_str)
    }

    /// Removes and returns a section for typed parsing. Missing sections come
    /// back empty so every key takes its default.
    pub fn take_section(&mut self, name: &str) -> Section {
        Section {
            name: name.to_string(),
            entries: self.sections.shift_remove(name).unwrap_or_default(),
        }
    }

    pub fn push_section(&mut self, name: &str, entries: Vec<(String, String)>) {
        let sec = self.sections.entry(name.to_string()).or_default();
        for (k, v) in entries {
            sec.insert(k, v);
        }
    }

    /// Errors naming the first section nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.sections.into_iter().next() {
            None => Ok(()),
            Some((name, entries)) => match entries.into_iter().next() {
                Some((k, _)) => Err(Error::UnknownKey(format!("{name}.{k}"))),
                None => Err(Error::UnknownKey(name)),
            },
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, entries) in &self.sections {
            out.push('[');
            out.push_str(name);
            out.push_str("]\n");
            for (k, v) in entries {
                out.push_str(k);
                out.push_str(" = ");
                out.push_str(v);
                out.push('\n');
            }
        }
        out
    }
}

pub struct Section {
    name: String,
    entries: IndexMap<String, String>,
}

impl Section {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.take_opt(key)?.unwrap_or(default))
    }

    pub fn take_opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.shift_remove(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
                Error::config(format!("{}.{key} = `{raw}`: {e}", self.name))
            }),
        }
    }

    pub fn take_list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        match self.entries.shift_remove(key) {
            None => Ok(default),
            Some(raw) => raw
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<T>()
                        .map_err(|e| Error::config(format!("{}.{key} = `{raw}`: {e}", self.name)))
                })
                .collect(),
        }
    }

    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, _)) => Err(Error::UnknownKey(format!("{}.{k}", self.name))),
        }
    }
}

/// Joins list values the way [`Section::take_list`] reads them.
pub fn join_list<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Builds `(key, value)` rows for a section.
#[derive(Default)]
pub struct SectionWriter {
    rows: Vec<(String, String)>,
}

impl SectionWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(mut self, key: &str, value: impl Display) -> Self {
        self.rows.push((key.to_string(), value.to_string()));
        self
    }

    pub fn into_rows(self) -> Vec<(String, String)> {
        self.rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_take() {
        let mut doc = KvDoc::parse("# comment\n[model]\nd_model = 64\nnorm=rmsnorm\n[stage.1]\nmax_len = 64\n").unwrap();
        let mut m = doc.take_section("model");
        assert_eq!(m.take("d_model", 0usize).unwrap(), 64);
        assert_eq!(m.take("n_layers", 2usize).unwrap(), 2);
        assert_eq!(m.take::<String>("norm", String::new()).unwrap(), "rmsnorm");
        m.finish().unwrap();
        let mut s = doc.take_section("stage.1");
        assert_eq!(s.take("max_len", 0usize).unwrap(), 64);
        s.finish().unwrap();
        doc.finish().unwrap();
    }

    #[test]
    fn leftover_key_is_named() {
        let mut doc = KvDoc::parse("[model]\nd_modle = 64\n").unwrap();
        let mut m = doc.take_section("model");
        let _ = m.take("d_model", 0usize).unwrap();
        let err = m.finish().unwrap_err();
        assert_eq!(err.to_string(), "unknown config key `model.d_modle`");
    }

    #[test]
    fn override_replaces_value() {
        let mut doc = KvDoc::parse("[train]\npeak_lr = 1e-3\n").unwrap();
        doc.apply_override("train.peak_lr=5e-4").unwrap();
        doc.apply_override("stage.2.steps=10").unwrap();
        assert_eq!(doc.get("train", "peak_lr"), Some("5e-4"));
        assert_eq!(doc.get("stage.2", "steps"), Some("10"));
        assert!(doc.apply_override("nodot=1").is_err());
    }

    #[test]
    fn text_round_trip() {
        let doc = KvDoc::parse("[a]\nx = 1\ny = two\n[b]\nz = 0.5\n").unwrap();
        assert_eq!(KvDoc::parse(&doc.to_text()).unwrap(), doc);
    }

    #[test]
    fn bad_lines_are_errors() {
        assert!(KvDoc::parse("x = 1\n").is_err());
        assert!(KvDoc::parse("[a]\njunk\n").is_err());
        assert!(KvDoc::parse("[a\n").is_err());
    }
}
